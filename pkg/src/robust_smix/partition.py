"""Block partition of Gaussian moments along a missingness pattern.

Given cluster moments (mu, sigma) and an observed-cell mask, these routines
split the moments into observed/missing blocks and produce the conditional
moments of the missing block given the observed values.  Covariances carry a
1/gamma scaling: the effective per-unit-scale covariance of a cluster is
sigma / gamma, so every returned delta matrix is the corresponding block
object divided by gamma.

Two conventions are supported for the observed-block matrix.  The default,
``consistent``, is the classical marginalization sigma_obs / gamma, the
unique choice for which conditional times marginal reassembles the joint
density.  ``paper_literal`` reproduces a published variant that sandwiches
the (doubled) cross-block information into the observed-block inverse; it is
kept behind a flag for comparison and is not used by default anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import numerics

__all__ = [
    "GaussianBlocks",
    "ConditionalMoments",
    "PatternGeometry",
    "partition",
    "pattern_geometry",
    "conditional_moments",
    "completed_moments",
]


@dataclass
class GaussianBlocks:
    """Observed/missing block view of one cluster's (mu, sigma)."""

    observed: np.ndarray      # int indices into the full coordinate order
    missing: np.ndarray
    mu_obs: np.ndarray        # (d_obs,)
    mu_miss: np.ndarray       # (d_miss,)
    sigma_obs: np.ndarray     # (d_obs, d_obs)
    sigma_miss: np.ndarray    # (d_miss, d_miss)
    sigma_cross: np.ndarray   # (d_miss, d_obs): rows missing, columns observed

    @property
    def d_obs(self) -> int:
        return self.observed.size

    @property
    def d_miss(self) -> int:
        return self.missing.size


@dataclass
class ConditionalMoments:
    """Conditional and observed-block moments for one row."""

    eps: np.ndarray             # (d_miss,) conditional mean of the missing block
    delta_miss: np.ndarray      # (d_miss, d_miss) conditional covariance / gamma
    delta_obs: np.ndarray       # (d_obs, d_obs) observed-block covariance / gamma
    logdet_delta_miss: float


@dataclass
class PatternGeometry:
    """Factorized per-(pattern, cluster) quantities reused across rows.

    ``gain`` maps observed-block residuals to missing-block conditional-mean
    offsets; ``chol_delta_obs`` is the factor of the observed-block matrix in
    the run's marginal mode, used for the observed-block Mahalanobis form.
    """

    blocks: GaussianBlocks
    gamma: float
    mode: str
    gain: np.ndarray            # (d_miss, d_obs)
    delta_miss: np.ndarray      # (d_miss, d_miss)
    logdet_delta_miss: float
    delta_obs: np.ndarray       # (d_obs, d_obs)
    chol_delta_obs: np.ndarray  # cholesky factor of delta_obs

    def conditional_means(self, x_obs_rows: np.ndarray) -> np.ndarray:
        """Conditional means for a batch of rows: (n, d_obs) -> (n, d_miss)."""
        resid = np.atleast_2d(x_obs_rows) - self.blocks.mu_obs[None, :]
        return self.blocks.mu_miss[None, :] + resid @ self.gain.T

    def observed_quad(self, x_obs_rows: np.ndarray) -> np.ndarray:
        """(x - mu_obs)^T delta_obs^{-1} (x - mu_obs) for a batch of rows."""
        resid = np.atleast_2d(x_obs_rows) - self.blocks.mu_obs[None, :]
        if self.blocks.d_obs == 0:
            return np.zeros(resid.shape[0])
        y = scipy.linalg.solve_triangular(self.chol_delta_obs, resid.T, lower=True)
        return np.sum(y * y, axis=0)


def partition(mu: np.ndarray, sigma: np.ndarray, observed_mask: np.ndarray) -> GaussianBlocks:
    """Split (mu, sigma) into observed/missing blocks for one mask."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    observed_mask = np.asarray(observed_mask, dtype=bool)
    d = mu.shape[0]
    if sigma.shape != (d, d):
        raise ValueError(f"sigma shape {sigma.shape} does not match mu length {d}")
    if observed_mask.shape != (d,):
        raise ValueError(f"mask shape {observed_mask.shape} does not match mu length {d}")
    obs = np.flatnonzero(observed_mask)
    miss = np.flatnonzero(~observed_mask)
    return GaussianBlocks(
        observed=obs,
        missing=miss,
        mu_obs=mu[obs],
        mu_miss=mu[miss],
        sigma_obs=sigma[np.ix_(obs, obs)],
        sigma_miss=sigma[np.ix_(miss, miss)],
        sigma_cross=sigma[np.ix_(miss, obs)],
    )


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def pattern_geometry(blocks: GaussianBlocks, gamma: float, mode: str = "consistent"
                     ) -> PatternGeometry:
    """Precompute the row-independent conditional quantities for one pattern."""
    if mode not in ("consistent", "paper_literal"):
        raise ValueError(f"unknown marginal mode {mode!r}")
    d_obs, d_miss = blocks.d_obs, blocks.d_miss
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")

    if d_obs:
        chol_obs = numerics.cholesky(blocks.sigma_obs)
        # gain = sigma_cross sigma_obs^{-1}
        gain = numerics.solve_from_cholesky(chol_obs, blocks.sigma_cross.T).T
    else:
        chol_obs = np.zeros((0, 0))
        gain = np.zeros((d_miss, 0))

    schur = _symmetrize(blocks.sigma_miss - gain @ blocks.sigma_cross.T)
    delta_miss = schur / gamma
    if d_miss:
        chol_schur = numerics.cholesky(schur)
        logdet_delta_miss = numerics.logdet_from_cholesky(chol_schur) - d_miss * np.log(gamma)
    else:
        chol_schur = np.zeros((0, 0))
        logdet_delta_miss = 0.0

    if mode == "consistent" or d_miss == 0 or d_obs == 0:
        delta_obs = blocks.sigma_obs / gamma
    else:
        obs_inv = numerics.solve_from_cholesky(chol_obs, np.eye(d_obs))
        sandwich = obs_inv @ blocks.sigma_cross.T @ numerics.solve_from_cholesky(
            chol_schur, blocks.sigma_cross @ obs_inv)
        inner = _symmetrize(obs_inv + 2.0 * sandwich)
        delta_obs = _symmetrize(numerics.spd_solve(inner, np.eye(d_obs))) / gamma
    chol_delta_obs = numerics.cholesky(delta_obs) if d_obs else np.zeros((0, 0))

    return PatternGeometry(
        blocks=blocks,
        gamma=float(gamma),
        mode=mode,
        gain=gain,
        delta_miss=delta_miss,
        logdet_delta_miss=float(logdet_delta_miss),
        delta_obs=delta_obs,
        chol_delta_obs=chol_delta_obs,
    )


def conditional_moments(blocks: GaussianBlocks, x_obs: np.ndarray, gamma: float,
                        mode: str = "consistent") -> ConditionalMoments:
    """Conditional moments of the missing block given observed values.

    eps = mu_miss + sigma_cross sigma_obs^{-1} (x_obs - mu_obs); delta_miss is
    the Schur complement over gamma.  delta_obs follows ``mode``.
    """
    geometry = pattern_geometry(blocks, gamma, mode)
    x_obs = np.asarray(x_obs, dtype=float)
    if x_obs.shape != (blocks.d_obs,):
        raise ValueError(f"x_obs shape {x_obs.shape}, expected ({blocks.d_obs},)")
    eps = geometry.conditional_means(x_obs[None, :])[0]
    return ConditionalMoments(
        eps=eps,
        delta_miss=geometry.delta_miss,
        delta_obs=geometry.delta_obs,
        logdet_delta_miss=geometry.logdet_delta_miss,
    )


def completed_moments(blocks: GaussianBlocks, moments: ConditionalMoments,
                      x_obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scatter conditional moments into full coordinates.

    Returns (x_tilde, delta_full): the completed row with observed cells
    passed through, and the (d, d) second-moment correction that is zero
    outside the missing block.
    """
    d = blocks.d_obs + blocks.d_miss
    x_tilde = np.empty(d)
    x_tilde[blocks.observed] = np.asarray(x_obs, dtype=float)
    x_tilde[blocks.missing] = moments.eps
    delta_full = np.zeros((d, d))
    if blocks.d_miss:
        delta_full[np.ix_(blocks.missing, blocks.missing)] = moments.delta_miss
    return x_tilde, delta_full

"""Classical maximum-likelihood GMM via EM, the non-robust baseline.

No latent scales, no priors, no missing-data machinery: rows with missing
cells must be mean-imputed up front (explicitly opted into), after which
this is textbook EM with a monotone log-likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .engine import _kmeanspp_centers, _lloyd_labels
from .model import ConfigurationError, MaskedDataset
from .numerics import LOG_2PI, cholesky_with_jitter, log_sum_exp, \
    logdet_from_cholesky

__all__ = ["GmmEm", "fit_gmm_em", "gmm_em_baseline"]

EMPTY_COMPONENT_MASS = 1e-10
LLOYD_STEPS = 10
REG_COVAR = 1e-6


@dataclass
class GmmEm:
    """Fitted maximum-likelihood mixture state."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    responsibilities: np.ndarray
    loglik_trace: list = field(default_factory=list)
    converged: bool = False

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.responsibilities, axis=1)


def _log_density(x, weights, means, covariances):
    """Per-row per-component log(pi_k N(x | mu_k, Sigma_k))."""
    n_rows, d = x.shape
    n_clusters = weights.shape[0]
    log_dens = np.empty((n_rows, n_clusters))
    for k in range(n_clusters):
        chol, _ = cholesky_with_jitter(covariances[k])
        dev = x - means[k]
        sol = scipy.linalg.solve_triangular(chol, dev.T, lower=True)
        maha = np.sum(sol * sol, axis=0)
        log_dens[:, k] = (np.log(weights[k]) - 0.5 * d * LOG_2PI
                          - 0.5 * logdet_from_cholesky(chol) - 0.5 * maha)
    return log_dens


def fit_gmm_em(data: MaskedDataset, n_clusters: int, seed: int = 0,
               max_iter: int = 200, tol: float = 1e-8,
               allow_mean_impute: bool = False) -> GmmEm:
    """Run EM to (local) convergence and return the full fitted state.

    Initialization is k-means++ seeding plus a few Lloyd steps on the
    (mean-imputed) rows, identical across calls with the same seed.
    """
    if not isinstance(n_clusters, (int, np.integer)) or n_clusters < 1:
        raise ConfigurationError(
            f"n_clusters must be a positive integer, got {n_clusters!r}")
    if n_clusters > data.n_rows:
        raise ConfigurationError(
            f"n_clusters {n_clusters} exceeds row count {data.n_rows}")
    if not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ConfigurationError(
            f"seed must be a nonnegative integer, got {seed!r}")
    if max_iter < 1:
        raise ConfigurationError(f"max_iter must be >= 1, got {max_iter!r}")
    if not data.mask.all():
        if not allow_mean_impute:
            raise ConfigurationError(
                "data has missing cells; pass allow_mean_impute=True to "
                "fit the baseline on mean-imputed rows")
        x = data.mean_imputed()
    else:
        x = np.array(data.values)

    n_rows, d = x.shape
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_centers(x, n_clusters, rng)
    hard = _lloyd_labels(x, centers.copy(), LLOYD_STEPS)

    weights = np.full(n_clusters, 1.0 / n_clusters)
    means = np.array(centers)
    covariances = np.empty((n_clusters, d, d))
    pooled = np.atleast_2d(np.cov(x, rowvar=False, bias=True))
    pooled += 1e-6 * np.trace(pooled) / d * np.eye(d)
    for k in range(n_clusters):
        members = hard == k
        if members.sum() > d:
            dev = x[members] - x[members].mean(axis=0)
            covariances[k] = dev.T @ dev / members.sum() + REG_COVAR * np.eye(d)
        else:
            covariances[k] = pooled

    trace = []
    responsibilities = np.full((n_rows, n_clusters), 1.0 / n_clusters)
    converged = False
    for _ in range(max_iter):
        log_dens = _log_density(x, weights, means, covariances)
        row_lse = log_sum_exp(log_dens, axis=1)
        loglik = float(np.sum(row_lse))
        responsibilities = np.exp(log_dens - row_lse[:, None])
        trace.append(loglik)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * (
                1.0 + abs(loglik)):
            converged = True
            break
        mass = responsibilities.sum(axis=0)
        for k in range(n_clusters):
            if mass[k] <= EMPTY_COMPONENT_MASS:
                continue
            weights[k] = mass[k] / n_rows
            means[k] = responsibilities[:, k] @ x / mass[k]
            dev = x - means[k]
            covariances[k] = ((responsibilities[:, k] * dev.T) @ dev / mass[k]
                              + REG_COVAR * np.eye(d))
        weights = weights / weights.sum()

    return GmmEm(weights, means, covariances, responsibilities, trace,
                 converged)


def gmm_em_baseline(data: MaskedDataset, n_clusters: int, seed: int = 0,
                    max_iter: int = 200, allow_mean_impute: bool = False):
    """Labels and the log-likelihood trace of the EM baseline."""
    state = fit_gmm_em(data, n_clusters, seed=seed, max_iter=max_iter,
                       allow_mean_impute=allow_mean_impute)
    return state.labels, state.loglik_trace

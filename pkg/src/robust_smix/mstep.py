"""M-step: responsibility-weighted moments and conjugate posterior updates.

The weighted sufficient statistics absorb the completed rows plus their
second-moment corrections; the hyperparameter update is the conjugate
Dirichlet / normal-inverse-Wishart / shape-rate refresh.  A cluster with no
responsibility mass falls back to its prior exactly.  The scale shape
expectations come from the Laplace machinery in alpha_beta, warm-started from
the previous iteration's density mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .alpha_beta import (
    AlphaDensityParams,
    FlatDensityError,
    beta_expectations,
    posterior_expectations,
)
from .model import ClusterPosterior, FitConfig, LatentPosterior, PriorSpec
from .numerics import FactorizationError, digamma, logdet_from_cholesky

__all__ = [
    "SufficientStats",
    "sufficient_stats",
    "update_hyperparameters",
    "refresh_expectations",
]

LOG_2 = float(np.log(2.0))


@dataclass
class SufficientStats:
    """Per-cluster weighted moments of one E-step.

    ``scatter_x`` is the E[u]-weighted scatter of completed rows about
    ``mu_x``; ``scatter_miss`` is the responsibility-weighted sum of
    missing-block corrections (not scaled by E[u]: the scale cancels against
    the conditional covariance).  Under ``scatter_mode == "normalized"`` both
    scatters are stored divided by the weighted row mass J * omega_bar and
    the update multiplies it back; the two routes agree up to rounding.
    """

    pi_bar: np.ndarray       # (K,) mean responsibility
    omega_bar: np.ndarray    # (K,) mean responsibility-weighted E[u]
    delta_bar: np.ndarray    # (K,) mean responsibility-weighted E[log u]
    mu_x: np.ndarray         # (K, d) weighted mean of completed rows
    scatter_x: np.ndarray    # (K, d, d)
    scatter_miss: np.ndarray  # (K, d, d)
    n_rows: int
    scatter_mode: str


def sufficient_stats(latent: LatentPosterior,
                     scatter_mode: str = "unnormalized") -> SufficientStats:
    """Accumulate weighted moments from a latent posterior."""
    if scatter_mode not in ("unnormalized", "normalized"):
        raise ValueError(f"unknown scatter_mode {scatter_mode!r}")
    r = latent.responsibilities
    J, K = r.shape
    d = latent.completed.shape[2]
    w = r * latent.e_scale
    pi_bar = r.mean(axis=0)
    omega_bar = w.mean(axis=0)
    delta_bar = (r * latent.e_log_scale).mean(axis=0)

    dead_scale = (omega_bar == 0.0) & (pi_bar > 0.0)
    if dead_scale.any():
        k = int(np.nonzero(dead_scale)[0][0])
        raise ValueError(
            f"cluster {k} has responsibility mass but zero expected scale; "
            "the scale posterior degenerated")

    sum_w = J * omega_bar
    safe = np.where(sum_w > 0.0, sum_w, 1.0)
    mu_x = np.einsum("jk,jkd->kd", w, latent.completed) / safe[:, None]
    centered = latent.completed - mu_x[None, :, :]
    scatter_x = np.einsum("jk,jka,jkb->kab", w, centered, centered)

    scatter_miss = np.zeros((K, d, d))
    for p, mask in enumerate(latent.pattern_masks):
        missing = ~np.asarray(mask, dtype=bool)
        if not missing.any():
            continue
        rows = latent.pattern_index == p
        mass = r[rows].sum(axis=0)
        block = np.ix_(missing, missing)
        for k in range(K):
            scatter_miss[k][block] += mass[k] * latent.pattern_delta[p][k]

    if scatter_mode == "normalized":
        scatter_x = scatter_x / safe[:, None, None]
        scatter_miss = scatter_miss / safe[:, None, None]
    return SufficientStats(pi_bar=pi_bar, omega_bar=omega_bar,
                           delta_bar=delta_bar, mu_x=mu_x,
                           scatter_x=scatter_x, scatter_miss=scatter_miss,
                           n_rows=J, scatter_mode=scatter_mode)


def update_hyperparameters(stats: SufficientStats, priors: PriorSpec,
                           previous=None):
    """Conjugate posterior update; returns (clusters, notes).

    New clusters inherit ``active`` and the cached expectations of
    ``previous`` as stale values until refresh_expectations overwrites them;
    the stale shape expectations double as the fallback when the new shape
    posterior has no interior mode.
    """
    K = stats.pi_bar.shape[0]
    d = stats.mu_x.shape[1]
    J = stats.n_rows
    log_p0 = float(np.log(priors.p0))
    notes = []
    clusters = []
    for k in range(K):
        j_pi = J * stats.pi_bar[k]
        j_om = J * stats.omega_bar[k]
        if stats.scatter_mode == "normalized":
            s_x = stats.scatter_x[k] * j_om
            s_m = stats.scatter_miss[k] * j_om
        else:
            s_x = stats.scatter_x[k]
            s_m = stats.scatter_miss[k]
        eta = priors.eta0 + j_om
        mu = (priors.eta0 * priors.mu0 + j_om * stats.mu_x[k]) / eta
        shift = stats.mu_x[k] - priors.mu0
        sigma = (priors.sigma0 + s_x + s_m
                 + (j_om * priors.eta0 / eta) * np.outer(shift, shift))
        sigma = 0.5 * (sigma + sigma.T)
        try:
            chol, jitter = numerics.cholesky_with_jitter(sigma)
        except FactorizationError as err:
            raise ValueError(
                f"cluster {k} covariance update is not positive definite "
                "even after jitter") from err
        if jitter > 0.0:
            sigma = sigma + jitter * np.eye(d)
            notes.append(f"cluster {k}: covariance needed jitter {jitter:.3e}")
        prev = previous[k] if previous is not None else None
        clusters.append(ClusterPosterior(
            kappa=priors.kappa0 + j_pi,
            eta=eta,
            mu=mu,
            gamma=priors.gamma0 + j_pi,
            sigma=sigma,
            log_p=log_p0 + J * stats.delta_bar[k],
            q=priors.q0 + j_om,
            s=priors.s0 + j_pi,
            r=priors.r0 + j_pi,
            active=prev.active if prev is not None else True,
            e_alpha=prev.e_alpha if prev is not None else None,
            e_beta=prev.e_beta if prev is not None else None,
            e_log_beta=prev.e_log_beta if prev is not None else None,
            e_log_gamma_alpha=(prev.e_log_gamma_alpha
                               if prev is not None else None),
            e_psi_s_alpha_plus1=(prev.e_psi_s_alpha_plus1
                                 if prev is not None else None),
            log_m=prev.log_m if prev is not None else None,
            alpha_mode=prev.alpha_mode if prev is not None else None,
            sigma_chol=chol,
        ))
    return clusters, notes


def refresh_expectations(clusters, config: FitConfig):
    """Fill the cached expectations of every cluster in place; returns notes.

    In gaussian mode the scale-shape machinery is skipped entirely.  A shape
    posterior without an interior mode keeps the previous iteration's shape
    expectations (or pins alpha to 1 on the first refresh) and reports it.
    """
    notes = []
    kappa_total = float(sum(c.kappa for c in clusters))
    psi_total = digamma(kappa_total)
    for k, c in enumerate(clusters):
        d = c.mu.shape[0]
        c.e_log_weight = digamma(c.kappa) - psi_total
        chol = c.ensure_sigma_chol()
        half = 0.5 * (c.gamma + 1.0 - np.arange(1, d + 1))
        c.e_log_det_cov = float(logdet_from_cholesky(chol)
                                - digamma(half).sum() - d * LOG_2)
        if config.model_kind == "gaussian":
            continue
        params = AlphaDensityParams(log_p=c.log_p, q=c.q, s=c.s, r=c.r)
        try:
            exps = posterior_expectations(params, hint=c.alpha_mode)
        except FlatDensityError:
            if c.e_alpha is None:
                c.e_alpha = 1.0
                c.e_log_gamma_alpha = 0.0
                c.e_psi_s_alpha_plus1 = float(digamma(c.s + 1.0))
                c.log_m = 0.0
                c.alpha_mode = None
                notes.append(f"cluster {k}: shape posterior has no interior "
                             "mode at first refresh, pinned alpha to 1")
            else:
                notes.append(f"cluster {k}: shape posterior has no interior "
                             "mode, carried previous shape expectations")
        else:
            c.e_alpha = exps.e_alpha
            c.e_log_gamma_alpha = exps.e_log_gamma_alpha
            c.e_psi_s_alpha_plus1 = exps.e_psi_s_alpha_plus1
            c.log_m = exps.log_m
            c.alpha_mode = exps.mode
            notes.extend(f"cluster {k}: {n}" for n in exps.notes)
        c.e_beta, c.e_log_beta = beta_expectations(
            params, c.e_alpha, c.e_psi_s_alpha_plus1)
    return notes

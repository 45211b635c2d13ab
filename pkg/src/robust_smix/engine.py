"""Fitting loop, initialization, prediction, and imputation.

One iteration is a VBE pass followed by a VBM pass, with the bound evaluated
after the VBM step; initialization also ends in a VBM pass so the first
iteration's bound is comparable.  After the loop, the latent state is
refreshed once against the final clusters, which makes prediction on the
training rows reproduce the stored responsibilities exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .elbo import check_convergence, compute_elbo, prior_log_normalizer
from .estep import e_step
from .model import (ConfigurationError, FitConfig, FitResult, LatentPosterior,
                    MaskedDataset, PriorSpec, validate)
from .mstep import (refresh_expectations, sufficient_stats,
                    update_hyperparameters)
from .numerics import digamma

__all__ = [
    "PredictionResult",
    "ImputationResult",
    "initialize",
    "fit",
    "predict",
    "impute",
    "worker_count",
]

INIT_SMOOTHING = 1e-3
INIT_SCALE_SHAPE = 2.0      # unit-mean scale posterior at initialization
LLOYD_STEPS = 10
DEGENERATE_MASS = 1e-8
DEGENERATE_PATIENCE = 3
VARIANCE_WEIGHT_EPS = 1e-10


@dataclass
class PredictionResult:
    """Hard labels, responsibilities, and a per-row outlier score.

    The score is E[u_j | assigned cluster]; low values mark rows the model
    explains by inflating their covariance, i.e. likely outliers.  In
    gaussian mode the scale is pinned and every score is 1.
    """

    labels: np.ndarray
    responsibilities: np.ndarray
    outlier_score: np.ndarray


@dataclass
class ImputationResult:
    """Completed matrix plus per-cell standard deviations for imputed cells.

    ``std`` is NaN at observed cells (nothing was imputed there) and +inf
    where the posterior variance is undefined because a contributing
    cluster's scale posterior has shape <= 1.
    """

    completed: np.ndarray
    std: np.ndarray
    diagnostics: list


def worker_count() -> int:
    """Worker cap from ROBUST_SMIX_THREADS (default 1).

    All reductions are fixed-order, so any cap produces identical results;
    the kernels here are vectorized single-pass and never exceed the cap.
    """
    raw = os.environ.get("ROBUST_SMIX_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(
            f"ROBUST_SMIX_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise ConfigurationError(
            f"ROBUST_SMIX_THREADS must be >= 1, got {n}")
    return n


def _kmeanspp_centers(x, n_clusters, rng):
    centers = [x[int(rng.integers(x.shape[0]))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(n_clusters - 1):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(x.shape[0], p=d2 / total))
        else:
            idx = int(rng.integers(x.shape[0]))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - centers[-1]) ** 2).sum(axis=1))
    return np.array(centers)


def _lloyd_labels(x, centers, n_steps):
    labels = None
    for _ in range(n_steps):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        for k in range(centers.shape[0]):
            members = labels == k
            if members.any():
                centers[k] = x[members].mean(axis=0)
    return labels


def _initial_latent(data: MaskedDataset, resp: np.ndarray,
                    config: FitConfig) -> LatentPosterior:
    """Latent state for the initialization VBM pass.

    Missing cells sit at their feature means with no second-moment
    correction; scales start at the unit-mean Gamma(2, 2) posterior in
    student mode and pinned at 1 in gaussian mode.
    """
    n_rows, d = data.values.shape
    n_clusters = resp.shape[1]
    completed = np.repeat(data.mean_imputed()[:, None, :], n_clusters, axis=1)
    ones = np.ones((n_rows, n_clusters))
    if config.model_kind == "student":
        shape = np.full((n_rows, n_clusters), INIT_SCALE_SHAPE)
        rate = np.full((n_rows, n_clusters), INIT_SCALE_SHAPE)
        e_log = np.full((n_rows, n_clusters),
                        float(digamma(INIT_SCALE_SHAPE))
                        - float(np.log(INIT_SCALE_SHAPE)))
    else:
        shape = rate = None
        e_log = np.zeros((n_rows, n_clusters))
    return LatentPosterior(
        responsibilities=resp, scale_shape=shape, scale_rate=rate,
        e_scale=ones, e_log_scale=e_log, completed=completed,
        pattern_index=np.zeros(n_rows, dtype=int),
        pattern_masks=[np.ones(d, dtype=bool)],
        pattern_delta=[np.zeros((n_clusters, 0, 0))],
        pattern_logdet_delta=np.zeros((1, n_clusters)))


def _vbm_from_responsibilities(data, resp, priors, config):
    latent = _initial_latent(data, resp, config)
    stats = sufficient_stats(latent, config.scatter_mode)
    clusters, notes = update_hyperparameters(stats, priors)
    notes = list(notes) + list(refresh_expectations(clusters, config))
    return clusters, latent, notes


def _initial_responsibilities(data, priors, config):
    rng = np.random.default_rng(config.seed)
    n_rows = data.n_rows
    n_clusters = priors.n_clusters
    if config.init_method == "random":
        return rng.dirichlet(np.ones(n_clusters), size=n_rows)
    filled = data.mean_imputed()
    centers = _kmeanspp_centers(filled, n_clusters, rng)
    labels = _lloyd_labels(filled, centers, LLOYD_STEPS)
    resp = np.full((n_rows, n_clusters), INIT_SMOOTHING / n_clusters)
    resp[np.arange(n_rows), labels] += 1.0 - INIT_SMOOTHING
    return resp


def initialize(data: MaskedDataset, priors: PriorSpec, config: FitConfig):
    """Seeded responsibilities plus the clusters from one VBM pass."""
    validate(data, priors, config)
    resp = _initial_responsibilities(data, priors, config)
    clusters, latent, _ = _vbm_from_responsibilities(data, resp, priors,
                                                     config)
    return clusters, latent


def _checked_initial_resp(resp, n_rows, n_clusters):
    resp = np.array(resp, dtype=float)
    if resp.shape != (n_rows, n_clusters):
        raise ConfigurationError(
            f"initial responsibilities must have shape "
            f"({n_rows}, {n_clusters}), got {resp.shape}")
    if (resp < 0).any() or not np.allclose(resp.sum(axis=1), 1.0, atol=1e-8):
        raise ConfigurationError(
            "initial responsibility rows must be nonnegative and sum to 1")
    return resp


def fit(data: MaskedDataset, priors: PriorSpec, config: FitConfig = None,
        initial_responsibilities=None) -> FitResult:
    """Run the VB fixed point to convergence or the iteration budget.

    initial_responsibilities overrides the seeded initialization with an
    explicit (J, K) matrix, which pins the starting point for trajectory
    comparisons and permutation checks.
    """
    if config is None:
        config = FitConfig()
    validate(data, priors, config)
    worker_count()
    n_clusters = priors.n_clusters
    diagnostics = []

    if initial_responsibilities is not None:
        resp = _checked_initial_resp(initial_responsibilities, data.n_rows,
                                     n_clusters)
    else:
        resp = _initial_responsibilities(data, priors, config)
    clusters, latent, notes = _vbm_from_responsibilities(data, resp, priors,
                                                         config)
    diagnostics += [f"initialization: {n}" for n in notes]

    log_m0 = prior_log_normalizer(priors)
    trace = []
    converged = False
    previous_total = None
    low_mass_streak = np.zeros(n_clusters, dtype=int)

    for iteration in range(config.max_iterations):
        latent = e_step(data, clusters, config)
        stats = sufficient_stats(latent, config.scatter_mode)
        clusters, notes = update_hyperparameters(stats, priors,
                                                 previous=clusters)
        notes = list(notes) + list(refresh_expectations(clusters, config))
        diagnostics += [f"iteration {iteration}: {n}" for n in notes]

        breakdown = compute_elbo(data, latent, clusters, priors, config,
                                 log_m0)
        for name in ("data", "missing_entropy", "scale_entropy", "labels",
                     "weights_block", "location_scale_block",
                     "shape_rate_block"):
            if not np.isfinite(getattr(breakdown, name)):
                raise ValueError(
                    f"non-finite ELBO subtotal {name!r} at iteration "
                    f"{iteration}")
        total = breakdown.total
        trace.append((iteration, total))

        mass = stats.pi_bar * data.n_rows
        low_mass_streak = np.where(mass < DEGENERATE_MASS,
                                   low_mass_streak + 1, 0)
        for k in np.flatnonzero(low_mass_streak >= DEGENERATE_PATIENCE):
            if clusters[k].active:
                clusters[k].active = False
                diagnostics.append(
                    f"iteration {iteration}: cluster {k} inactive, expected "
                    f"mass below {DEGENERATE_MASS:g} for "
                    f"{DEGENERATE_PATIENCE} iterations")

        if previous_total is not None:
            check = check_convergence(previous_total, total,
                                      config.elbo_rel_tolerance)
            if check.decreased:
                diagnostics.append(
                    f"iteration {iteration}: bound decreased by "
                    f"{-check.change:.6e}")
            if check.converged:
                converged = True
                break
        previous_total = total

    latent = e_step(data, clusters, config)
    return FitResult(clusters=clusters, latent=latent, priors=priors,
                     config=config, elbo_trace=trace, converged=converged,
                     diagnostics=diagnostics)


def _check_dim(model: FitResult, data: MaskedDataset):
    d = model.clusters[0].mu.shape[0]
    if data.n_features != d:
        raise ValueError(
            f"data has {data.n_features} features, model expects {d}")


def predict(model: FitResult, data: MaskedDataset) -> PredictionResult:
    """Classify rows under the fitted posterior without updating it."""
    _check_dim(model, data)
    latent = e_step(data, model.clusters, model.config)
    resp = latent.responsibilities
    labels = resp.argmax(axis=1)
    if model.config.model_kind == "student":
        score = latent.e_scale[np.arange(data.n_rows), labels]
    else:
        score = np.ones(data.n_rows)
    return PredictionResult(labels=labels, responsibilities=resp,
                            outlier_score=score)


def impute(model: FitResult, data: MaskedDataset) -> ImputationResult:
    """Fill missing cells with the responsibility-weighted conditional means.

    The reported spread mixes the within-cluster conditional variance with
    the between-cluster spread of the conditional means.  In student mode
    the within part is the t-scaled diag(delta) * rate / (shape - 1), which
    requires shape > 1; rows where a weighted cluster violates that get an
    infinite standard deviation and a diagnostic.
    """
    _check_dim(model, data)
    latent = e_step(data, model.clusters, model.config)
    resp = latent.responsibilities
    n_rows, d = data.values.shape
    student = model.config.model_kind == "student"

    mean = np.einsum("jk,jkd->jd", resp, latent.completed)
    completed = np.where(data.mask, data.values, mean)
    std = np.full((n_rows, d), np.nan)
    diagnostics = []

    for p, mask in enumerate(latent.pattern_masks):
        missing = ~np.asarray(mask, dtype=bool)
        if not missing.any():
            continue
        rows = np.flatnonzero(latent.pattern_index == p)
        diag = np.diagonal(latent.pattern_delta[p], axis1=1, axis2=2)  # (K, m)
        for j in rows:
            if student:
                shape = latent.scale_shape[j]
                rate = latent.scale_rate[j]
                weighted = resp[j] > VARIANCE_WEIGHT_EPS
                bad = weighted & (shape <= 1.0)
                if bad.any():
                    k = int(np.flatnonzero(bad)[0])
                    std[j, missing] = np.inf
                    diagnostics.append(
                        f"row {j}: imputation variance undefined, scale "
                        f"posterior shape <= 1 for cluster {k}")
                    continue
                with np.errstate(divide="ignore"):
                    factor = np.where(shape > 1.0, rate / (shape - 1.0),
                                      np.inf)
            else:
                factor = np.ones(resp.shape[1])
            within = diag * factor[:, None]                      # (K, m)
            centers = latent.completed[j][:, missing]            # (K, m)
            second = resp[j] @ (within + centers ** 2)
            variance = np.maximum(second - mean[j, missing] ** 2, 0.0)
            std[j, missing] = np.sqrt(variance)

    return ImputationResult(completed=completed, std=std,
                            diagnostics=diagnostics)

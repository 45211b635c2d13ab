"""Variational E-step: missing-value, scale, and label posteriors per row.

Given fixed cluster posteriors, every row j and cluster k get

  q(x_miss | u, z=k) = N(eps, delta_miss / u)   (u fixed to 1 in gaussian mode)
  q(u | z=k)         = Gamma(shape, rate)
  q(z)               = softmax of marginalized log weights,

where the missing block is handled through the partition module and u is
integrated out of the label weights in closed form.

The uncertainty term added to each Mahalanobis distance is dim/eta with
dim = d (the full dimension) by default: the location posterior is uncertain
in all d coordinates, and exact marginalization over x_miss leaves the full
d/eta behind, which is what keeps the bound a coordinate ascent.  The
observed-block count only replaces d inside the 2 pi volume factor and the
Gamma shape.  scale_dim_mode="observed" switches the uncertainty term to
d_obs/eta for experiments; it is deliberately not a FitConfig field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .model import ClusterPosterior, FitConfig, LatentPosterior, MaskedDataset
from .numerics import LOG_2PI, digamma, log_gamma, log_sum_exp
from .partition import PatternGeometry, partition, pattern_geometry

__all__ = [
    "ClusterReadView",
    "build_read_views",
    "expected_mahalanobis",
    "scale_posterior",
    "log_responsibility",
    "normalize_responsibilities",
    "e_step",
]

SCALE_DIM_MODES = ("full", "observed")


@dataclass
class ClusterReadView:
    """A cluster posterior plus its per-pattern conditional geometry.

    Read-only during an E-step pass; attribute access falls through to the
    underlying ClusterPosterior so cached expectations read naturally.
    """

    cluster: ClusterPosterior
    geometries: list  # PatternGeometry per missingness pattern

    def __getattr__(self, name):
        return getattr(self.cluster, name)


def build_read_views(clusters, pattern_masks, marginal_mode: str):
    """Precompute per-(cluster, pattern) conditional moments."""
    views = []
    for cluster in clusters:
        geoms = [
            pattern_geometry(
                partition(cluster.mu, cluster.sigma, mask),
                cluster.gamma, marginal_mode)
            for mask in pattern_masks
        ]
        views.append(ClusterReadView(cluster=cluster, geometries=geoms))
    return views


def expected_mahalanobis(x_obs, mu_obs, delta_obs, eta: float, dim: int) -> float:
    """(x_obs - mu_obs)^T delta_obs^{-1} (x_obs - mu_obs) + dim / eta.

    dim counts the coordinates whose location uncertainty contributes the
    1/eta term (the full dimension under exact marginalization).
    """
    x_obs = np.asarray(x_obs, dtype=float)
    mu_obs = np.asarray(mu_obs, dtype=float)
    if x_obs.shape != mu_obs.shape:
        raise ValueError(f"shape mismatch: x_obs {x_obs.shape} vs mu_obs {mu_obs.shape}")
    if x_obs.size == 0:
        return float(dim) / float(eta)
    diff = x_obs - mu_obs
    sol = numerics.spd_solve(np.asarray(delta_obs, dtype=float), diff)
    return float(diff @ sol) + float(dim) / float(eta)


def scale_posterior(maha, cluster, d_obs: int):
    """Gamma posterior of the precision scale u given z = k.

    maha already includes the location-uncertainty term.  Returns
    (shape, rate, E[u], E[log u]); accepts scalars or arrays of distances.
    """
    maha = np.asarray(maha, dtype=float)
    if np.any(maha < 0.0):
        raise ValueError("negative squared Mahalanobis distance")
    shape_val = cluster.e_alpha + 0.5 * d_obs
    rate = 0.5 * maha + cluster.e_beta
    shape = np.full(rate.shape, shape_val)
    e_u = shape_val / rate
    e_log_u = digamma(shape_val) - np.log(rate)
    return shape, rate, e_u, e_log_u


def _student_log_weight(cluster, maha, logdet_miss, d_obs: int):
    shape = cluster.e_alpha + 0.5 * d_obs
    rate = 0.5 * np.asarray(maha, dtype=float) + cluster.e_beta
    return (cluster.e_log_weight
            - 0.5 * (cluster.e_log_det_cov - logdet_miss)
            - 0.5 * d_obs * LOG_2PI
            + cluster.e_alpha * cluster.e_log_beta
            - cluster.e_log_gamma_alpha
            + log_gamma(shape)
            - shape * np.log(rate))


def _gaussian_log_weight(cluster, maha, logdet_miss, d_obs: int):
    return (cluster.e_log_weight
            - 0.5 * (cluster.e_log_det_cov - logdet_miss)
            - 0.5 * d_obs * LOG_2PI
            - 0.5 * np.asarray(maha, dtype=float))


def log_responsibility(x_obs, cluster, observed_mask, model_kind: str = "student",
                       marginal_mode: str = "consistent",
                       scale_dim_mode: str = "full") -> float:
    """Reference per-row unnormalized log label weight for one cluster.

    Builds the conditional geometry on the fly; the batched e_step path
    must agree with this to rounding.
    """
    observed_mask = np.asarray(observed_mask, dtype=bool)
    base = cluster.cluster if isinstance(cluster, ClusterReadView) else cluster
    geom = pattern_geometry(partition(base.mu, base.sigma, observed_mask),
                            base.gamma, marginal_mode)
    d = observed_mask.size
    d_obs = int(observed_mask.sum())
    dim = d if scale_dim_mode == "full" else d_obs
    x_obs = np.asarray(x_obs, dtype=float).reshape(1, d_obs)
    maha = geom.observed_quad(x_obs)[0] + dim / base.eta
    if model_kind == "student":
        return float(_student_log_weight(base, maha, geom.logdet_delta_miss, d_obs))
    return float(_gaussian_log_weight(base, maha, geom.logdet_delta_miss, d_obs))


def normalize_responsibilities(log_weights, floor: float = 0.0) -> np.ndarray:
    """Row-wise softmax of (J, K) log weights, with an optional floor."""
    log_weights = np.asarray(log_weights, dtype=float)
    norm = log_sum_exp(log_weights, axis=1)
    dead = ~np.isfinite(norm)
    if dead.any():
        j = int(np.nonzero(dead)[0][0])
        raise ValueError(f"row {j} has no finite cluster weight")
    r = np.exp(log_weights - norm[:, None])
    if floor > 0.0:
        r = np.maximum(r, floor)
        r /= r.sum(axis=1, keepdims=True)
    return r


def e_step(data: MaskedDataset, clusters, config: FitConfig,
           scale_dim_mode: str = "full") -> LatentPosterior:
    """One full VBE pass, vectorized over rows grouped by missingness pattern."""
    if scale_dim_mode not in SCALE_DIM_MODES:
        raise ValueError(f"unknown scale_dim_mode {scale_dim_mode!r}")
    J, d = data.values.shape
    K = len(clusters)
    student = config.model_kind == "student"

    unique_masks, pattern_index = np.unique(data.mask, axis=0, return_inverse=True)
    pattern_masks = [unique_masks[p] for p in range(unique_masks.shape[0])]
    views = build_read_views(clusters, pattern_masks, config.marginal_mode)

    log_rho = np.empty((J, K))
    maha_all = np.empty((J, K))
    completed = np.empty((J, K, d))
    scale_shape = np.empty((J, K)) if student else None
    scale_rate = np.empty((J, K)) if student else None
    e_scale = np.ones((J, K))
    e_log_scale = np.zeros((J, K))
    pattern_delta = []
    pattern_logdet = np.empty((len(pattern_masks), K))

    for p, mask in enumerate(pattern_masks):
        rows = np.nonzero(pattern_index == p)[0]
        d_obs = int(mask.sum())
        dim = d if scale_dim_mode == "full" else d_obs
        x_obs = data.values[np.ix_(rows, np.nonzero(mask)[0])]
        deltas = []
        for k, view in enumerate(views):
            geom: PatternGeometry = view.geometries[p]
            base = view.cluster
            maha = geom.observed_quad(x_obs) + dim / base.eta
            maha_all[rows, k] = maha
            full = np.empty((rows.size, d))
            full[:, mask] = x_obs
            if d_obs < d:
                full[:, ~mask] = geom.conditional_means(x_obs)
            completed[rows, k] = full
            deltas.append(geom.delta_miss)
            pattern_logdet[p, k] = geom.logdet_delta_miss
            if student:
                shape, rate, e_u, e_log_u = scale_posterior(maha, base, d_obs)
                scale_shape[rows, k] = shape
                scale_rate[rows, k] = rate
                e_scale[rows, k] = e_u
                e_log_scale[rows, k] = e_log_u
                log_rho[rows, k] = _student_log_weight(
                    base, maha, geom.logdet_delta_miss, d_obs)
            else:
                log_rho[rows, k] = _gaussian_log_weight(
                    base, maha, geom.logdet_delta_miss, d_obs)
        pattern_delta.append(np.stack(deltas) if d_obs < d
                             else np.zeros((K, 0, 0)))

    responsibilities = normalize_responsibilities(
        log_rho, floor=config.min_responsibility_floor)
    return LatentPosterior(
        responsibilities=responsibilities,
        scale_shape=scale_shape,
        scale_rate=scale_rate,
        e_scale=e_scale,
        e_log_scale=e_log_scale,
        completed=completed,
        pattern_index=pattern_index,
        pattern_masks=pattern_masks,
        pattern_delta=pattern_delta,
        pattern_logdet_delta=pattern_logdet,
        maha=maha_all,
    )

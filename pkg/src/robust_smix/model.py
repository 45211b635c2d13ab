"""Data structures shared across the inference pipeline.

A dataset is a value matrix plus an observation mask; unobserved cells are
stored as NaN so that any code path that reads one poisons its output and
fails tests.  Priors, per-cluster posteriors, run configuration and the fit
result are plain dataclasses with a flat JSON persistence format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, asdict

import numpy as np

from . import numerics

__all__ = [
    "ConfigurationError",
    "MaskedDataset",
    "PriorSpec",
    "FitConfig",
    "ClusterPosterior",
    "LatentPosterior",
    "FitResult",
    "default_priors",
    "validate",
    "save_model",
    "load_model",
]

MODEL_FORMAT = "robust-smix-model"
MODEL_FORMAT_VERSION = 1

INIT_METHODS = ("kmeanspp", "random")
MARGINAL_MODES = ("consistent", "paper_literal")
MODEL_KINDS = ("student", "gaussian")
SCATTER_MODES = ("unnormalized", "normalized")


class ConfigurationError(ValueError):
    """A prior, config field, or dataset/config combination is invalid."""


class MaskedDataset:
    """Value matrix with an observed-cell mask.

    ``values`` is (J, d) float64 with NaN at every unobserved position;
    ``mask`` is (J, d) bool with True meaning observed.  Rows may be fully
    missing.  Observed cells must be finite.
    """

    def __init__(self, values, mask=None):
        values = np.array(values, dtype=float, copy=True)
        if values.ndim != 2:
            raise ValueError(f"dataset values must be 2-D, got shape {values.shape}")
        if mask is None:
            mask = ~np.isnan(values)
        mask = np.array(mask, dtype=bool, copy=True)
        if mask.shape != values.shape:
            raise ValueError(
                f"mask shape {mask.shape} does not match values shape {values.shape}")
        observed = values[mask]
        if observed.size and not np.isfinite(observed).all():
            raise ValueError("observed cells must be finite")
        values[~mask] = np.nan
        self.values = values
        self.mask = mask

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def observed_count_per_row(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def observed_count_per_feature(self) -> np.ndarray:
        return self.mask.sum(axis=0)

    def feature_means(self) -> np.ndarray:
        """Per-feature mean over observed cells only."""
        counts = self.observed_count_per_feature()
        sums = np.where(self.mask, np.nan_to_num(self.values, nan=0.0), 0.0).sum(axis=0)
        with np.errstate(invalid="ignore"):
            return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

    def feature_variances(self) -> np.ndarray:
        """Per-feature population variance over observed cells only."""
        means = self.feature_means()
        counts = self.observed_count_per_feature()
        centered = np.where(self.mask, np.nan_to_num(self.values - means, nan=0.0), 0.0)
        with np.errstate(invalid="ignore"):
            return np.where(counts > 0, (centered**2).sum(axis=0) / np.maximum(counts, 1),
                            np.nan)

    def mean_imputed(self) -> np.ndarray:
        """Copy of values with unobserved cells replaced by feature means."""
        filled = np.where(self.mask, self.values, self.feature_means()[None, :])
        return filled


@dataclass
class PriorSpec:
    """Hyperparameters of the conjugate (and scale) priors, shared by all clusters."""

    n_clusters: int
    kappa0: float
    eta0: float
    mu0: np.ndarray
    gamma0: float
    sigma0: np.ndarray
    p0: float
    q0: float
    s0: float
    r0: float

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=float)
        self.sigma0 = np.asarray(self.sigma0, dtype=float)


@dataclass
class FitConfig:
    max_iterations: int = 200
    elbo_rel_tolerance: float = 1e-8
    seed: int = 0
    init_method: str = "kmeanspp"
    marginal_mode: str = "consistent"
    model_kind: str = "student"
    min_responsibility_floor: float = 0.0
    scatter_mode: str = "unnormalized"


@dataclass
class ClusterPosterior:
    """Posterior hyperparameters for one cluster, plus cached expectations.

    The cached block (``e_``-prefixed fields, ``log_m``, ``sigma_chol``) is
    refreshed after every M-step; scale-related caches stay None in gaussian
    mode where the latent precision scale is pinned to 1.
    """

    kappa: float
    eta: float
    mu: np.ndarray
    gamma: float
    sigma: np.ndarray
    log_p: float
    q: float
    s: float
    r: float
    active: bool = True
    # cached expectations
    e_log_weight: float | None = None
    e_log_det_cov: float | None = None
    e_alpha: float | None = None
    e_beta: float | None = None
    e_log_beta: float | None = None
    e_log_gamma_alpha: float | None = None
    e_psi_s_alpha_plus1: float | None = None
    log_m: float | None = None
    alpha_mode: float | None = None
    sigma_chol: np.ndarray | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)

    def ensure_sigma_chol(self) -> np.ndarray:
        if self.sigma_chol is None:
            self.sigma_chol = numerics.cholesky(self.sigma)
        return self.sigma_chol

    def e_precision(self) -> np.ndarray:
        """E of the inverse covariance: gamma * sigma^{-1}."""
        chol = self.ensure_sigma_chol()
        return self.gamma * numerics.solve_from_cholesky(chol, np.eye(self.sigma.shape[0]))


@dataclass
class LatentPosterior:
    """Per-row latent posteriors for a fixed cluster set.

    ``completed`` holds the per-cluster conditional completion of each row
    (observed cells pass through).  Second-moment corrections for missing
    blocks are stored once per (missingness pattern, cluster) and scattered
    on demand by ``delta_correction``.
    """

    responsibilities: np.ndarray        # (J, K)
    scale_shape: np.ndarray             # (J, K) Gamma shape of the scale posterior
    scale_rate: np.ndarray              # (J, K) Gamma rate
    e_scale: np.ndarray                 # (J, K) E[u]
    e_log_scale: np.ndarray             # (J, K)
    completed: np.ndarray               # (J, K, d)
    pattern_index: np.ndarray           # (J,) index into the pattern tables
    pattern_masks: list                 # per pattern: (d,) bool observed mask
    pattern_delta: list                 # per pattern: (K, d_miss, d_miss)
    pattern_logdet_delta: np.ndarray    # (P, K) log |delta_miss|
    maha: np.ndarray | None = None      # (J, K) expected squared distance

    def delta_correction(self, j: int, k: int) -> np.ndarray:
        """Dense (d, d) second-moment correction for row j under cluster k."""
        d = self.completed.shape[2]
        out = np.zeros((d, d))
        p = self.pattern_index[j]
        missing = ~self.pattern_masks[p]
        if missing.any():
            out[np.ix_(missing, missing)] = self.pattern_delta[p][k]
        return out


@dataclass
class FitResult:
    clusters: list
    latent: LatentPosterior | None
    priors: PriorSpec
    config: FitConfig
    elbo_trace: list          # [(iteration, elbo), ...]
    converged: bool
    diagnostics: list

    @property
    def n_iterations(self) -> int:
        return len(self.elbo_trace)


def default_priors(dataset: MaskedDataset, n_clusters: int) -> PriorSpec:
    """Data-driven weak priors.

    Location prior at the observed feature means with small precision count;
    covariance prior at the diagonal of observed feature variances with the
    smallest degrees of freedom giving a finite prior mean; unit scale-prior
    parameters.
    """
    d = dataset.n_features
    return PriorSpec(
        n_clusters=int(n_clusters),
        kappa0=1.0,
        eta0=0.01,
        mu0=dataset.feature_means(),
        gamma0=float(d + 2),
        sigma0=np.diag(dataset.feature_variances()),
        p0=1.0,
        q0=1.0,
        s0=1.0,
        r0=1.0,
    )


def _check(condition: bool, message: str):
    if not condition:
        raise ConfigurationError(message)


def validate(dataset: MaskedDataset, priors: PriorSpec, config: FitConfig) -> None:
    """Reject invalid priors, config fields, or dataset/config combinations."""
    d = dataset.n_features
    j = dataset.n_rows
    _check(d >= 1, "dataset must have at least one feature")

    never_observed = np.flatnonzero(dataset.observed_count_per_feature() == 0)
    if j > 0 and never_observed.size:
        raise ConfigurationError(
            f"feature {int(never_observed[0])} has no observed cells")

    k = priors.n_clusters
    _check(k >= 1, f"n_clusters must be >= 1, got {k}")
    _check(k <= j or j == 0, f"n_clusters = {k} exceeds the number of rows {j}")
    _check(priors.kappa0 > 0, f"kappa0 must be > 0, got {priors.kappa0}")
    _check(priors.eta0 > 0, f"eta0 must be > 0, got {priors.eta0}")
    _check(priors.mu0.shape == (d,), f"mu0 must have shape ({d},), got {priors.mu0.shape}")
    _check(np.isfinite(priors.mu0).all(), "mu0 must be finite")
    _check(priors.gamma0 > d - 1, f"gamma0 must exceed d - 1 = {d - 1}, got {priors.gamma0}")
    _check(priors.sigma0.shape == (d, d),
           f"sigma0 must have shape ({d}, {d}), got {priors.sigma0.shape}")
    try:
        numerics.cholesky(priors.sigma0)
    except (ValueError, numerics.FactorizationError) as exc:
        raise ConfigurationError(f"sigma0 must be symmetric positive definite: {exc}")
    for name in ("p0", "q0", "s0"):
        _check(getattr(priors, name) > 0, f"{name} must be > 0, got {getattr(priors, name)}")
    _check(priors.r0 >= 1, f"r0 must be >= 1, got {priors.r0}")

    _check(config.max_iterations >= 1,
           f"max_iterations must be >= 1, got {config.max_iterations}")
    _check(config.elbo_rel_tolerance > 0,
           f"elbo_rel_tolerance must be > 0, got {config.elbo_rel_tolerance}")
    _check(config.init_method in INIT_METHODS,
           f"init_method must be one of {INIT_METHODS}, got {config.init_method!r}")
    _check(config.marginal_mode in MARGINAL_MODES,
           f"marginal_mode must be one of {MARGINAL_MODES}, got {config.marginal_mode!r}")
    _check(config.model_kind in MODEL_KINDS,
           f"model_kind must be one of {MODEL_KINDS}, got {config.model_kind!r}")
    _check(config.scatter_mode in SCATTER_MODES,
           f"scatter_mode must be one of {SCATTER_MODES}, got {config.scatter_mode!r}")
    _check(0.0 <= config.min_responsibility_floor <= 1.0 / k,
           f"min_responsibility_floor must lie in [0, 1/K], got "
           f"{config.min_responsibility_floor}")
    _check(int(config.seed) == config.seed and config.seed >= 0,
           f"seed must be a non-negative integer, got {config.seed}")


def _array_out(a: np.ndarray):
    return np.asarray(a, dtype=float).tolist()


def save_model(result: FitResult, path: str) -> None:
    """Write priors, config, cluster posteriors, and the ELBO trace as JSON.

    Floats are serialized with round-trip precision (17 significant digits),
    so save followed by load reproduces every parameter bit for bit.
    """
    clusters = []
    for c in result.clusters:
        entry = {}
        for f in fields(ClusterPosterior):
            if f.name == "sigma_chol":
                continue
            value = getattr(c, f.name)
            if isinstance(value, np.ndarray):
                value = _array_out(value)
            entry[f.name] = value
        clusters.append(entry)
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "priors": {
            "n_clusters": result.priors.n_clusters,
            "kappa0": result.priors.kappa0,
            "eta0": result.priors.eta0,
            "mu0": _array_out(result.priors.mu0),
            "gamma0": result.priors.gamma0,
            "sigma0": _array_out(result.priors.sigma0),
            "p0": result.priors.p0,
            "q0": result.priors.q0,
            "s0": result.priors.s0,
            "r0": result.priors.r0,
        },
        "config": asdict(result.config),
        "clusters": clusters,
        "elbo_trace": [[int(i), float(v)] for i, v in result.elbo_trace],
        "converged": bool(result.converged),
        "diagnostics": list(result.diagnostics),
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(doc, handle, indent=1)
        handle.write("\n")


def load_model(path: str) -> FitResult:
    with open(path, "r", encoding="utf-8") as handle:
        doc = json.load(handle)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('version')}")
    pr = doc["priors"]
    priors = PriorSpec(
        n_clusters=int(pr["n_clusters"]),
        kappa0=float(pr["kappa0"]),
        eta0=float(pr["eta0"]),
        mu0=np.asarray(pr["mu0"], dtype=float),
        gamma0=float(pr["gamma0"]),
        sigma0=np.asarray(pr["sigma0"], dtype=float),
        p0=float(pr["p0"]),
        q0=float(pr["q0"]),
        s0=float(pr["s0"]),
        r0=float(pr["r0"]),
    )
    config = FitConfig(**doc["config"])
    clusters = []
    for entry in doc["clusters"]:
        kwargs = dict(entry)
        kwargs["mu"] = np.asarray(kwargs["mu"], dtype=float)
        kwargs["sigma"] = np.asarray(kwargs["sigma"], dtype=float)
        clusters.append(ClusterPosterior(**kwargs))
    return FitResult(
        clusters=clusters,
        latent=None,
        priors=priors,
        config=config,
        elbo_trace=[(int(i), float(v)) for i, v in doc["elbo_trace"]],
        converged=bool(doc["converged"]),
        diagnostics=list(doc.get("diagnostics", [])),
    )

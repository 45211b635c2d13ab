"""Evidence lower bound assembly and convergence bookkeeping.

The bound is evaluated once per iteration, after the hyperparameter update,
at the (latent, cluster) pair produced by that iteration.  Terms are grouped
by distribution: per-row data and entropy pieces, then one prior-minus-
posterior contribution per parameter block.

The shape-rate block collapses exactly: because the stored (log p, q, s, r)
are the tilted update of the same responsibilities and scale moments that
appear in the data terms, every expectation of the scale-prior log density
cancels against the posterior's tilt, leaving only the two log normalizers.
This is what lets the bound avoid the cross expectation E[alpha log beta],
which the Laplace machinery cannot produce.  When the prior kernel is not
normalizable its log normalizer is taken to be zero, a constant-offset
convention that leaves all bound differences intact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.special

from .alpha_beta import AlphaDensityParams, is_normalizable, log_normalizer
from .model import FitConfig, LatentPosterior, MaskedDataset, PriorSpec
from .numerics import LOG_2PI, log_gamma

__all__ = [
    "ElboBreakdown",
    "ConvergenceCheck",
    "compute_elbo",
    "check_convergence",
    "prior_log_normalizer",
    "DECREASE_SLACK",
]

LOG_2 = float(np.log(2.0))

# a decrease is only flagged beyond this relative slack, which covers the
# quadratic-approximation error the shape expectations inject per iteration
DECREASE_SLACK = 1e-6


@dataclass
class ElboBreakdown:
    """Additive pieces of the bound.

    ``data`` is the expected complete-data log density of the rows;
    ``missing_entropy`` and ``scale_entropy`` are the entropies of the
    conditional missing-value and scale posteriors; ``labels`` combines the
    expected label prior with the label entropy.  The three ``*_block``
    fields are E[log p] - E[log q] for the weight, location-scale, and
    shape-rate parameter blocks.
    """

    data: float
    missing_entropy: float
    scale_entropy: float
    labels: float
    weights_block: float
    location_scale_block: float
    shape_rate_block: float

    @property
    def row_total(self) -> float:
        return (self.data + self.missing_entropy + self.scale_entropy
                + self.labels)

    @property
    def total(self) -> float:
        return (self.row_total + self.weights_block
                + self.location_scale_block + self.shape_rate_block)


@dataclass
class ConvergenceCheck:
    converged: bool
    decreased: bool
    change: float


def _log_dirichlet_const(concentrations) -> float:
    concentrations = np.asarray(concentrations, dtype=float)
    return float(scipy.special.gammaln(concentrations.sum())
                 - scipy.special.gammaln(concentrations).sum())


def prior_log_normalizer(priors: PriorSpec) -> float:
    """log M0 of the shape-rate prior kernel; zero when it is improper."""
    params = AlphaDensityParams(log_p=float(np.log(priors.p0)), q=priors.q0,
                                s=priors.s0, r=priors.r0)
    if not is_normalizable(params):
        return 0.0
    return log_normalizer(params)


def compute_elbo(data: MaskedDataset, latent: LatentPosterior, clusters,
                 priors: PriorSpec, config: FitConfig,
                 log_m0: float | None = None) -> ElboBreakdown:
    """Assemble the bound at one (latent, clusters) pair.

    log_m0 may be passed in to avoid recomputing the prior shape-rate
    normalizer every iteration.
    """
    J, d = data.values.shape
    K = len(clusters)
    student = config.model_kind == "student"
    r = latent.responsibilities
    d_miss = (~data.mask).sum(axis=1).astype(float)[:, None]        # (J, 1)
    e_log_det = np.array([c.e_log_det_cov for c in clusters])       # (K,)
    e_log_weight = np.array([c.e_log_weight for c in clusters])     # (K,)
    logdet_miss = latent.pattern_logdet_delta[latent.pattern_index]  # (J, K)

    # Full-dimensional expected distance of each completed row under the
    # current posterior, plus the cross-metric trace of the stored completion
    # covariance.  At a self-consistent (latent, clusters) pair the distance
    # collapses to the observed-block form and the trace to d_miss, but after
    # an update the completions are one step stale and the general form is
    # what keeps the bound exact.
    quad = np.empty((J, K))
    corr = np.zeros((J, K))
    for k, c in enumerate(clusters):
        prec = c.e_precision()
        resid = latent.completed[:, k, :] - c.mu[None, :]
        quad[:, k] = np.einsum("ja,ab,jb->j", resid, prec, resid) + d / c.eta
        for p, mask in enumerate(latent.pattern_masks):
            missing = ~np.asarray(mask, dtype=bool)
            if not missing.any():
                continue
            rows = latent.pattern_index == p
            block = prec[np.ix_(missing, missing)]
            corr[rows, k] = float(np.sum(block * latent.pattern_delta[p][k]))

    data_term = float(np.sum(r * (-0.5) * (
        d * LOG_2PI - d * latent.e_log_scale + e_log_det[None, :]
        + latent.e_scale * quad + corr)))

    missing_entropy = float(np.sum(r * 0.5 * (
        d_miss * (1.0 + LOG_2PI) + logdet_miss
        - d_miss * latent.e_log_scale)))

    if student:
        shape, rate = latent.scale_shape, latent.scale_rate
        scale_entropy = -float(np.sum(r * (
            shape * np.log(rate) - log_gamma(shape)
            + (shape - 1.0) * latent.e_log_scale - shape)))
    else:
        scale_entropy = 0.0

    labels = float(np.sum(r * e_log_weight[None, :])
                   - np.sum(scipy.special.xlogy(r, r)))

    kappa = np.array([c.kappa for c in clusters])
    weights_block = (_log_dirichlet_const(np.full(K, priors.kappa0))
                     - _log_dirichlet_const(kappa)
                     + float(((priors.kappa0 - kappa) * e_log_weight).sum()))

    logdet_sigma0 = float(np.linalg.slogdet(priors.sigma0)[1])
    location_scale = 0.0
    for c in clusters:
        prec = c.e_precision()
        shift = c.mu - priors.mu0
        logdet_sigma = float(np.linalg.slogdet(c.sigma)[1])
        p_side = (
            -0.5 * (d * LOG_2PI - d * np.log(priors.eta0) + c.e_log_det_cov
                    + priors.eta0 * (shift @ prec @ shift + d / c.eta))
            + 0.5 * priors.gamma0 * logdet_sigma0
            - 0.5 * priors.gamma0 * d * LOG_2
            - scipy.special.multigammaln(0.5 * priors.gamma0, d)
            - 0.5 * (priors.gamma0 + d + 1.0) * c.e_log_det_cov
            - 0.5 * float(np.trace(priors.sigma0 @ prec)))
        q_side = (
            -0.5 * (d * LOG_2PI - d * np.log(c.eta) + c.e_log_det_cov + d)
            + 0.5 * c.gamma * logdet_sigma
            - 0.5 * c.gamma * d * LOG_2
            - scipy.special.multigammaln(0.5 * c.gamma, d)
            - 0.5 * (c.gamma + d + 1.0) * c.e_log_det_cov
            - 0.5 * c.gamma * d)
        location_scale += p_side - q_side

    if student:
        if log_m0 is None:
            log_m0 = prior_log_normalizer(priors)
        shape_rate = float(sum(c.log_m - log_m0 for c in clusters))
    else:
        shape_rate = 0.0

    return ElboBreakdown(
        data=data_term,
        missing_entropy=missing_entropy,
        scale_entropy=scale_entropy,
        labels=labels,
        weights_block=float(weights_block),
        location_scale_block=float(location_scale),
        shape_rate_block=shape_rate,
    )


def check_convergence(previous: float, current: float,
                      rel_tolerance: float) -> ConvergenceCheck:
    """Relative-change stopping rule with a decrease flag.

    Converged when |change| <= rel_tolerance * (1 + |current|); a decrease
    beyond DECREASE_SLACK * (1 + |current|) is flagged for diagnostics.
    """
    change = current - previous
    scale = 1.0 + abs(current)
    return ConvergenceCheck(
        converged=bool(abs(change) <= rel_tolerance * scale),
        decreased=bool(change < -DECREASE_SLACK * scale),
        change=float(change),
    )

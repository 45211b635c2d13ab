"""Posterior machinery for the latent-scale shape and rate parameters.

Each cluster carries a shape parameter alpha whose posterior is known only
up to normalization,

    u(alpha) = (alpha - 1) log p + log Gamma(s alpha + 1)
               - (s alpha + 1) log q - r log Gamma(alpha),    alpha > 0.

Expectations under exp(u) are approximated by applying Laplace's method
separately to the numerator and denominator of

    E[h(alpha)] = int h(alpha) exp(u(alpha)) d alpha / int exp(u(alpha)) d alpha,

so that the leading approximation error cancels in the ratio.  Weights that
can change sign (log Gamma, digamma) are shifted by a constant large enough
to keep them positive on the whole search bracket and the constant is
subtracted after the division.

The rate parameter beta is conditionally conjugate given alpha, so its
expectations are closed-form in E[alpha] and E[psi(s alpha + 1)].

All heavy lifting happens in log domain; p enters only through log p, which
the fitting loop accumulates directly (exponentiating would overflow for a
few hundred rows).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import LOG_2PI, digamma, log_gamma, tetragamma, trigamma

__all__ = [
    "AlphaDensityParams",
    "LaplaceResult",
    "AlphaExpectations",
    "LogCurve",
    "Weight",
    "FlatDensityError",
    "CurvatureError",
    "DEFAULT_BRACKET",
    "log_density_unnormalized",
    "is_normalizable",
    "find_mode",
    "find_curve_mode",
    "curve_log_integral",
    "log_normalizer",
    "laplace_integral",
    "posterior_expectations",
    "beta_expectations",
    "constant_weight",
    "identity_weight",
    "shifted_log_gamma_weight",
    "shifted_digamma_weight",
]

# Search bracket for the mode of the (weighted) log density.
DEFAULT_BRACKET = (1e-6, 1e6)

# Grid resolution for the sign scan of u' across the bracket.
_SCAN_POINTS = 301

# Newton budget and stationarity tolerance.
_MAX_ITERATIONS = 200
_STATIONARITY_RTOL = 1e-9

# Minimum of log Gamma on (0, inf), attained where digamma vanishes
# (alpha* = 1.46163...).  Both bracket endpoints give large positive
# values, so this is also the minimum over the search bracket.
_LOG_GAMMA_MINIMIZER = 1.4616321449683622
_LOG_GAMMA_MINIMUM = -0.12148629053584961


class FlatDensityError(ValueError):
    """The weighted log density has no interior maximum on the bracket."""


class CurvatureError(ValueError):
    """The candidate stationary point has non-negative curvature."""


@dataclass(frozen=True)
class AlphaDensityParams:
    """Parameters of the unnormalized shape density, with p in log domain."""

    log_p: float
    q: float
    s: float
    r: float

    def __post_init__(self):
        if not math.isfinite(self.log_p):
            raise ValueError(f"log_p must be finite, got {self.log_p}")
        for name in ("q", "s", "r"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0.0):
                raise ValueError(f"{name} must be a positive finite real, got {val}")

    @property
    def p(self) -> float:
        return math.exp(self.log_p)

    @classmethod
    def from_p(cls, p: float, q: float, s: float, r: float) -> "AlphaDensityParams":
        if not p > 0.0:
            raise ValueError(f"p must be positive, got {p}")
        return cls(log_p=math.log(p), q=q, s=s, r=r)


@dataclass(frozen=True)
class LaplaceResult:
    """Mode summary of a weighted log density.

    value is u at the mode, log_curvature is log(-u'') there, and converged
    asserts |u'(mode)| <= 1e-9 * max(1, |u(mode)|) with negative curvature.
    """

    value: float
    mode: float
    log_curvature: float
    converged: bool
    iterations: int
    notes: tuple = ()


@dataclass(frozen=True)
class AlphaExpectations:
    """Laplace-approximated expectations under the shape posterior.

    mode is the maximizer of the unweighted log density, kept so callers
    can warm-start the next refresh.
    """

    e_alpha: float
    e_log_gamma_alpha: float
    e_psi_s_alpha_plus1: float
    log_m: float
    notes: tuple = ()
    mode: float = None


@dataclass(frozen=True)
class LogCurve:
    """A smooth log integrand with analytic first and second derivatives.

    All three callables must accept plain floats as well as numpy arrays
    elementwise; the mode search scans the derivative on a vector grid and
    then iterates on scalars.
    """

    value: Callable
    deriv: Callable
    second: Callable


@dataclass(frozen=True)
class Weight:
    """A positive weight h given through log h and its two derivatives.

    shift records a constant already added to keep h positive; the
    expectation code subtracts it after forming the Laplace ratio.
    """

    log_value: Callable
    dlog: Callable
    d2log: Callable
    shift: float = 0.0
    name: str = "weight"


def constant_weight(value: float) -> Weight:
    if not value > 0.0:
        raise ValueError(f"constant weight must be positive, got {value}")
    log_c = math.log(value)
    return Weight(
        log_value=lambda a: np.full_like(np.asarray(a, dtype=float), log_c),
        dlog=lambda a: np.zeros_like(np.asarray(a, dtype=float)),
        d2log=lambda a: np.zeros_like(np.asarray(a, dtype=float)),
        shift=0.0,
        name=f"constant({value})",
    )


def identity_weight() -> Weight:
    """h(alpha) = alpha, the weight behind E[alpha]."""
    return Weight(
        log_value=lambda a: np.log(a),
        dlog=lambda a: 1.0 / a,
        d2log=lambda a: -1.0 / (a * a),
        shift=0.0,
        name="alpha",
    )


def shifted_log_gamma_weight() -> Weight:
    """h(alpha) = log Gamma(alpha) + c with c = 1 - min over the bracket.

    log Gamma is negative on (1, 2), so the raw weight cannot feed a
    Laplace integral; the shift keeps h >= 1 everywhere on the bracket.
    """
    c = 1.0 - _LOG_GAMMA_MINIMUM

    def log_value(a):
        return np.log(log_gamma(a) + c)

    def dlog(a):
        g = log_gamma(a) + c
        return digamma(a) / g

    def d2log(a):
        g = log_gamma(a) + c
        psi = digamma(a)
        return (trigamma(a) * g - psi * psi) / (g * g)

    return Weight(log_value=log_value, dlog=dlog, d2log=d2log, shift=c,
                  name="log_gamma_shifted")


def shifted_digamma_weight(s: float, bracket=DEFAULT_BRACKET) -> Weight:
    """h(alpha) = psi(s*alpha + 1) + c with c = 1 - min over the bracket.

    psi(s*alpha + 1) is increasing in alpha, so the bracket minimum sits at
    the left endpoint.
    """
    if not s > 0.0:
        raise ValueError(f"s must be positive, got {s}")
    c = 1.0 - digamma(s * bracket[0] + 1.0)

    def log_value(a):
        return np.log(digamma(s * a + 1.0) + c)

    def dlog(a):
        arg = s * a + 1.0
        g = digamma(arg) + c
        return s * trigamma(arg) / g

    def d2log(a):
        arg = s * a + 1.0
        g = digamma(arg) + c
        g1 = s * trigamma(arg)
        g2 = s * s * tetragamma(arg)
        return (g2 * g - g1 * g1) / (g * g)

    return Weight(log_value=log_value, dlog=dlog, d2log=d2log, shift=c,
                  name="digamma_shifted")


def log_density_unnormalized(alpha, params: AlphaDensityParams):
    """(alpha-1) log p + log Gamma(s alpha + 1) - (s alpha + 1) log q - r log Gamma(alpha)."""
    a = np.asarray(alpha, dtype=float)
    if np.any(a <= 0.0) or not np.all(np.isfinite(a)):
        raise ValueError("alpha must be positive and finite")
    log_q = math.log(params.q)
    out = (
        (a - 1.0) * params.log_p
        + log_gamma(params.s * a + 1.0)
        - (params.s * a + 1.0) * log_q
        - params.r * log_gamma(a)
    )
    return float(out) if np.isscalar(alpha) else out


def _density_curve(params: AlphaDensityParams) -> LogCurve:
    log_q = math.log(params.q)
    s, r, log_p = params.s, params.r, params.log_p

    def value(a):
        return ((a - 1.0) * log_p + log_gamma(s * a + 1.0)
                - (s * a + 1.0) * log_q - r * log_gamma(a))

    def deriv(a):
        return log_p + s * digamma(s * a + 1.0) - s * log_q - r * digamma(a)

    def second(a):
        return s * s * trigamma(s * a + 1.0) - r * trigamma(a)

    return LogCurve(value=value, deriv=deriv, second=second)


def _weighted_curve(params: AlphaDensityParams, weight: Weight) -> LogCurve:
    base = _density_curve(params)
    return LogCurve(
        value=lambda a: base.value(a) + weight.log_value(a),
        deriv=lambda a: base.deriv(a) + weight.dlog(a),
        second=lambda a: base.second(a) + weight.d2log(a),
    )


def is_normalizable(params: AlphaDensityParams) -> bool:
    """Whether exp(u) has a finite integral on (0, inf).

    By Stirling, u(alpha) grows like (s - r) alpha log alpha + B alpha with
    B = log p + s log s - s log q, plus ((1 + r)/2) log alpha.  The integral
    is finite iff s < r, or s = r and B < 0 (at B = 0 the positive log term
    still diverges).
    """
    if params.s > params.r:
        return False
    if params.s < params.r:
        return True
    b = params.log_p + params.s * math.log(params.s) - params.s * math.log(params.q)
    return b < 0.0


def _scan_descending_brackets(curve: LogCurve, bracket) -> list:
    lo, hi = bracket
    grid = np.geomspace(lo, hi, _SCAN_POINTS)
    dvals = np.asarray(curve.deriv(grid), dtype=float)
    if not np.all(np.isfinite(dvals)):
        raise ValueError("derivative of the log integrand is not finite on the bracket")
    pairs = []
    for i in range(len(grid) - 1):
        if dvals[i] > 0.0 and dvals[i + 1] <= 0.0:
            pairs.append((float(grid[i]), float(grid[i + 1])))
    return pairs


def _newton_in_bracket(curve: LogCurve, lo: float, hi: float):
    d_lo = float(curve.deriv(lo))
    d_hi = float(curve.deriv(hi))
    # Secant start, safe because d_lo > 0 >= d_hi.
    x = lo + d_lo * (hi - lo) / (d_lo - d_hi) if d_lo != d_hi else 0.5 * (lo + hi)
    converged = False
    iterations = 0
    for iterations in range(1, _MAX_ITERATIONS + 1):
        d1 = float(curve.deriv(x))
        # |u'| <= tol * 1 implies the full test; the value is only needed
        # when |u| > 1 could relax it.
        if abs(d1) <= _STATIONARITY_RTOL or (
                abs(d1) <= _STATIONARITY_RTOL * max(1.0, abs(float(curve.value(x))))):
            converged = True
            break
        if d1 > 0.0:
            lo = x
        else:
            hi = x
        d2 = float(curve.second(x))
        step = x - d1 / d2 if d2 < 0.0 else None
        x = step if step is not None and lo < step < hi else 0.5 * (lo + hi)
    return x, converged, iterations


def find_curve_mode(curve: LogCurve, bracket=DEFAULT_BRACKET,
                    hint: float = None) -> LaplaceResult:
    """Locate the maximizer of an arbitrary log integrand on the bracket.

    Grid sign-scan of the derivative followed by safeguarded Newton inside
    each descending bracket; with several stationary maxima the global one
    wins and the result carries a note.  A hint near the expected mode
    skips the scan when a small bracket around it already straddles the
    root (the fitting loop passes the previous iteration's mode).
    """
    if hint is not None and bracket[0] < hint < bracket[1]:
        lo = max(hint / 4.0, bracket[0])
        hi = min(hint * 4.0, bracket[1])
        if float(curve.deriv(lo)) > 0.0 >= float(curve.deriv(hi)):
            x, converged, iterations = _newton_in_bracket(curve, lo, hi)
            second = float(curve.second(x))
            if converged and second < 0.0:
                return LaplaceResult(
                    value=float(curve.value(x)),
                    mode=x,
                    log_curvature=math.log(-second),
                    converged=True,
                    iterations=iterations,
                )
    pairs = _scan_descending_brackets(curve, bracket)
    if not pairs:
        raise FlatDensityError(
            "no interior maximum on the bracket: the density is flat, "
            "monotone, or not normalizable")
    candidates = []
    for lo, hi in pairs:
        x, converged, iterations = _newton_in_bracket(curve, lo, hi)
        candidates.append((float(curve.value(x)), x, converged, iterations))
    candidates.sort(key=lambda t: t[0])
    value, mode, converged, iterations = candidates[-1]
    notes = ()
    if len(candidates) > 1:
        notes = (f"{len(candidates)} stationary maxima on the bracket; "
                 f"kept the global one at alpha={mode:.6g}",)
    second = float(curve.second(mode))
    if not second < 0.0:
        raise CurvatureError(
            f"non-negative curvature {second} at candidate mode {mode}")
    return LaplaceResult(
        value=value,
        mode=mode,
        log_curvature=math.log(-second),
        converged=converged,
        iterations=iterations,
        notes=notes,
    )


def find_mode(params: AlphaDensityParams, weight: Weight = None,
              hint: float = None) -> LaplaceResult:
    """Mode of u (+ log h when a weight is supplied) on the default bracket."""
    curve = _density_curve(params) if weight is None else _weighted_curve(params, weight)
    return find_curve_mode(curve, hint=hint)


def curve_log_integral(curve: LogCurve, bracket=DEFAULT_BRACKET, hint: float = None):
    """Log of the Laplace estimate of int exp(curve) together with the mode."""
    res = find_curve_mode(curve, bracket, hint=hint)
    log_integral = res.value + 0.5 * LOG_2PI - 0.5 * res.log_curvature
    return log_integral, res


def log_normalizer(params: AlphaDensityParams, hint: float = None) -> float:
    """Laplace log of int exp(u(alpha)) d alpha (the density normalizer)."""
    log_z, _ = curve_log_integral(_density_curve(params), hint=hint)
    return log_z


def laplace_integral(params: AlphaDensityParams, weight: Weight = None) -> float:
    """Laplace estimate of int h(alpha) exp(u(alpha)) d alpha.

    Computed in log domain and exponentiated on return; may overflow to inf
    for strongly peaked posteriors, in which case use the log-domain pieces
    from curve_log_integral directly.
    """
    curve = _density_curve(params) if weight is None else _weighted_curve(params, weight)
    log_integral, _ = curve_log_integral(curve)
    with np.errstate(over="ignore"):
        return float(np.exp(log_integral))


def posterior_expectations(params: AlphaDensityParams,
                           hint: float = None) -> AlphaExpectations:
    """E[alpha], E[log Gamma(alpha)], E[psi(s alpha + 1)], and log M.

    Each expectation is a ratio of two Laplace integrals sharing the same
    density factor; sign-indefinite weights run in shifted form and the
    shift is subtracted after the division.  hint warm-starts the mode
    searches (the fitting loop passes the previous density mode).
    """
    log_z, den = curve_log_integral(_density_curve(params), hint=hint)
    notes = list(den.notes)
    if not den.converged:
        notes.append("denominator mode search did not reach stationarity tolerance")

    def ratio(weight: Weight) -> float:
        log_num, res = curve_log_integral(_weighted_curve(params, weight),
                                          hint=den.mode)
        notes.extend(res.notes)
        if not res.converged:
            notes.append(f"{weight.name} mode search did not reach stationarity tolerance")
        return float(np.exp(log_num - log_z)) - weight.shift

    e_alpha = ratio(identity_weight())
    e_log_gamma_alpha = ratio(shifted_log_gamma_weight())
    e_psi = ratio(shifted_digamma_weight(params.s))
    return AlphaExpectations(
        e_alpha=e_alpha,
        e_log_gamma_alpha=e_log_gamma_alpha,
        e_psi_s_alpha_plus1=e_psi,
        log_m=log_z,
        notes=tuple(notes),
        mode=den.mode,
    )


def beta_expectations(params: AlphaDensityParams, e_alpha: float, e_psi: float):
    """E[beta] = (s E[alpha] + 1)/q and E[log beta] = E[psi(s alpha + 1)] - log q."""
    if not (math.isfinite(e_alpha) and math.isfinite(e_psi)):
        raise ValueError("beta_expectations requires finite inputs")
    e_beta = (params.s * e_alpha + 1.0) / params.q
    e_log_beta = e_psi - math.log(params.q)
    return e_beta, e_log_beta

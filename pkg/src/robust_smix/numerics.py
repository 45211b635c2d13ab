"""Special functions and SPD matrix kernels shared by all estimators.

The gamma-family functions are evaluated with upward recurrence to x >= 8
followed by the de Moivre / Stirling tail series.  They accept scalars or
arrays and are accurate to well below the tolerances the estimators need
(log_gamma <= 1e-12 relative on [1e-6, 1e6], digamma <= 1e-10 absolute on
[1e-4, 1e6]).  The SPD kernels wrap LAPACK and report the failing pivot on
factorization failure, which the M-step uses for its jitter escalation.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.linalg

__all__ = [
    "FactorizationError",
    "log_gamma",
    "digamma",
    "trigamma",
    "multivariate_log_gamma",
    "cholesky",
    "cholesky_with_jitter",
    "logdet_from_cholesky",
    "solve_from_cholesky",
    "spd_logdet",
    "spd_solve",
    "log_sum_exp",
]

LOG_2PI = math.log(2.0 * math.pi)

# Upward recurrence stops once every argument reaches this value; the tail
# series below are then accurate to ~1e-15 relative.
_TAIL_CUTOFF = 8.0

# B_{2n} / (2n (2n-1)): tail of log Gamma.
_LOG_GAMMA_TAIL = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
)

# B_{2n} / (2n): tail of digamma.
_DIGAMMA_TAIL = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)

# B_{2n}: tail of trigamma.
_TRIGAMMA_TAIL = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
)

# (2n + 1) B_{2n}: tail of tetragamma.
_TETRAGAMMA_TAIL = (
    3.0 / 6.0,
    -5.0 / 30.0,
    7.0 / 42.0,
    -9.0 / 30.0,
    55.0 / 66.0,
    -13.0 * 691.0 / 2730.0,
    15.0 * 7.0 / 6.0,
)


class FactorizationError(ValueError):
    """An allegedly SPD matrix failed to factor.

    ``pivot`` is the 0-based index of the leading minor that is not
    positive definite.
    """

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = int(pivot)
        super().__init__(message or f"matrix is not positive definite (pivot {self.pivot})")


def _as_positive_array(x, name: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    if arr.size and not np.all(arr > 0.0):
        bad = arr[~(arr > 0.0)] if arr.ndim else arr
        raise ValueError(f"{name} requires strictly positive arguments, got {bad!r}")
    return arr, arr.ndim == 0


def _horner(z: np.ndarray, coefficients) -> np.ndarray:
    acc = np.full_like(z, coefficients[-1])
    for c in coefficients[-2::-1]:
        acc = c + z * acc
    return acc


def _horner_scalar(z: float, coefficients) -> float:
    acc = coefficients[-1]
    for c in coefficients[-2::-1]:
        acc = c + z * acc
    return acc


def _scalar_arg(x, name: str):
    """Plain float for genuinely scalar input, None when x is array-like."""
    if isinstance(x, (float, int)):
        w = float(x)
    elif isinstance(x, np.generic) or (isinstance(x, np.ndarray) and x.ndim == 0):
        w = float(x)
    else:
        return None
    if not w > 0.0:
        raise ValueError(f"{name} requires strictly positive arguments, got {w!r}")
    return w


def log_gamma(x):
    """log Gamma(x) for x > 0. Scalar in, scalar out; arrays elementwise."""
    w = _scalar_arg(x, "log_gamma")
    if w is not None:
        shift = 0.0
        while w < _TAIL_CUTOFF:
            shift -= math.log(w)
            w += 1.0
        z = 1.0 / (w * w)
        return ((w - 0.5) * math.log(w) - w + 0.5 * LOG_2PI
                + _horner_scalar(z, _LOG_GAMMA_TAIL) / w + shift)
    arr, scalar = _as_positive_array(x, "log_gamma")
    w = np.atleast_1d(arr).astype(float).copy()
    shift = np.zeros_like(w)
    mask = w < _TAIL_CUTOFF
    while mask.any():
        shift[mask] -= np.log(w[mask])
        w[mask] += 1.0
        mask = w < _TAIL_CUTOFF
    z = 1.0 / (w * w)
    out = (w - 0.5) * np.log(w) - w + 0.5 * LOG_2PI + _horner(z, _LOG_GAMMA_TAIL) / w
    out = out + shift
    return float(out[0]) if scalar else out.reshape(arr.shape)


def digamma(x):
    """psi(x) = d/dx log Gamma(x) for x > 0."""
    w = _scalar_arg(x, "digamma")
    if w is not None:
        shift = 0.0
        while w < _TAIL_CUTOFF:
            shift -= 1.0 / w
            w += 1.0
        z = 1.0 / (w * w)
        return math.log(w) - 0.5 / w - z * _horner_scalar(z, _DIGAMMA_TAIL) + shift
    arr, scalar = _as_positive_array(x, "digamma")
    w = np.atleast_1d(arr).astype(float).copy()
    shift = np.zeros_like(w)
    mask = w < _TAIL_CUTOFF
    while mask.any():
        shift[mask] -= 1.0 / w[mask]
        w[mask] += 1.0
        mask = w < _TAIL_CUTOFF
    z = 1.0 / (w * w)
    out = np.log(w) - 0.5 / w - z * _horner(z, _DIGAMMA_TAIL) + shift
    return float(out[0]) if scalar else out.reshape(arr.shape)


def trigamma(x):
    """psi'(x), the derivative of digamma, for x > 0."""
    w = _scalar_arg(x, "trigamma")
    if w is not None:
        shift = 0.0
        while w < _TAIL_CUTOFF:
            shift += 1.0 / (w * w)
            w += 1.0
        z = 1.0 / (w * w)
        return 1.0 / w + 0.5 * z + z / w * _horner_scalar(z, _TRIGAMMA_TAIL) + shift
    arr, scalar = _as_positive_array(x, "trigamma")
    w = np.atleast_1d(arr).astype(float).copy()
    shift = np.zeros_like(w)
    mask = w < _TAIL_CUTOFF
    while mask.any():
        shift[mask] += 1.0 / (w[mask] * w[mask])
        w[mask] += 1.0
        mask = w < _TAIL_CUTOFF
    z = 1.0 / (w * w)
    out = 1.0 / w + 0.5 * z + z / w * _horner(z, _TRIGAMMA_TAIL) + shift
    return float(out[0]) if scalar else out.reshape(arr.shape)


def tetragamma(x):
    """psi''(x), the second derivative of digamma, for x > 0."""
    w = _scalar_arg(x, "tetragamma")
    if w is not None:
        shift = 0.0
        while w < _TAIL_CUTOFF:
            shift -= 2.0 / (w ** 3)
            w += 1.0
        z = 1.0 / (w * w)
        return -z - z / w - z * z * _horner_scalar(z, _TETRAGAMMA_TAIL) + shift
    arr, scalar = _as_positive_array(x, "tetragamma")
    w = np.atleast_1d(arr).astype(float).copy()
    shift = np.zeros_like(w)
    mask = w < _TAIL_CUTOFF
    while mask.any():
        shift[mask] -= 2.0 / (w[mask] ** 3)
        w[mask] += 1.0
        mask = w < _TAIL_CUTOFF
    z = 1.0 / (w * w)
    out = -z - z / w - z * z * _horner(z, _TETRAGAMMA_TAIL) + shift
    return float(out[0]) if scalar else out.reshape(arr.shape)


def multivariate_log_gamma(a: float, d: int) -> float:
    """log of the d-dimensional multivariate gamma function at a.

    Requires a > (d - 1) / 2, the domain where every summand is defined.
    """
    d = int(d)
    if d < 1:
        raise ValueError(f"multivariate_log_gamma requires d >= 1, got {d}")
    if not a > (d - 1) / 2.0:
        raise ValueError(
            f"multivariate_log_gamma requires a > (d - 1) / 2 = {(d - 1) / 2.0}, got {a}"
        )
    out = 0.25 * d * (d - 1) * math.log(math.pi)
    for i in range(d):
        out += log_gamma(a - 0.5 * i)
    return float(out)


def _checked_square(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} requires a square matrix, got shape {arr.shape}")
    return arr


def cholesky(a) -> np.ndarray:
    """Lower-triangular L with L L^T = a.

    Raises FactorizationError carrying the 0-based failing pivot when the
    matrix is not positive definite.
    """
    arr = _checked_square(a, "cholesky")
    n = arr.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    if not np.isfinite(arr).all():
        raise ValueError("cholesky requires finite entries")
    scale = np.abs(arr).max()
    if not np.allclose(arr, arr.T, atol=1e-8 * max(scale, 1.0), rtol=0.0):
        raise ValueError("cholesky requires a symmetric matrix")
    c, info = scipy.linalg.lapack.dpotrf(arr, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise FactorizationError(pivot=info - 1)
    if info < 0:
        raise ValueError(f"illegal value in argument {-info} of dpotrf")
    return c


def cholesky_with_jitter(a, max_escalations: int = 3) -> tuple[np.ndarray, float]:
    """Factor a, adding escalating diagonal jitter if needed.

    Tries bare cholesky first, then eps * I with eps = 1e-10 * trace / d,
    escalating tenfold up to ``max_escalations`` times.  Returns (L, jitter
    actually added).  Raises FactorizationError when the last attempt fails.
    """
    arr = _checked_square(a, "cholesky_with_jitter")
    n = arr.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    trace = float(np.trace(arr))
    base = 1e-10 * max(trace / n, np.finfo(float).tiny)
    jitter = 0.0
    for attempt in range(max_escalations + 1):
        try:
            return cholesky(arr + jitter * np.eye(n)), jitter
        except FactorizationError:
            if attempt == max_escalations:
                raise
            jitter = base * 10.0**attempt
    raise AssertionError("unreachable")


def logdet_from_cholesky(chol: np.ndarray) -> float:
    return float(2.0 * np.sum(np.log(np.diag(chol)))) if chol.shape[0] else 0.0


def solve_from_cholesky(chol: np.ndarray, b) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if chol.shape[0] == 0:
        return np.zeros_like(b)
    return scipy.linalg.cho_solve((chol, True), b)


def spd_logdet(a) -> float:
    """log |a| for symmetric positive definite a."""
    return logdet_from_cholesky(cholesky(a))


def spd_solve(a, b) -> np.ndarray:
    """Solve a x = b for symmetric positive definite a."""
    return solve_from_cholesky(cholesky(a), b)


def log_sum_exp(v, axis=None):
    """log(sum(exp(v))) with max-shift; rows of all -inf give -inf, not NaN."""
    arr = np.asarray(v, dtype=float)
    if arr.size == 0:
        raise ValueError("log_sum_exp of an empty array")
    m = np.max(arr, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(over="ignore", divide="ignore"):
        s = np.sum(np.exp(arr - m_safe), axis=axis, keepdims=True)
        out = m_safe + np.log(s)
    out = np.where(m == -np.inf, -np.inf, out)
    out = np.where(m == np.inf, np.inf, out)
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)

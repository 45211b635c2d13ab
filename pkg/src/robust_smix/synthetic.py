"""Seeded synthetic benchmark generator.

Draws K unit-covariance Gaussian blobs with means arranged so every pair
sits at the requested separation (a regular simplex when the dimension
allows it), contaminates a fraction of rows with uniform box outliers
labeled -1, and masks cells completely at random while guaranteeing at
least one observed cell per row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ConfigurationError, MaskedDataset

__all__ = ["SyntheticSpec", "simplex_means", "generate"]

# Cap on per-row mask redraws before declaring the spec infeasible.
RESAMPLE_LIMIT = 10_000


@dataclass
class SyntheticSpec:
    """Recipe for one synthetic dataset; all randomness flows from seed."""

    J: int
    d: int
    K: int
    separation: float = 6.0
    outlier_fraction: float = 0.0
    outlier_scale: float = 2.0
    missing_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("J", "d", "K"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(
                    f"{name} must be a positive integer, got {value!r}")
        if not self.separation > 0:
            raise ConfigurationError(
                f"separation must be positive, got {self.separation!r}")
        if not 0 <= self.outlier_fraction < 1:
            raise ConfigurationError(
                f"outlier_fraction must lie in [0, 1), "
                f"got {self.outlier_fraction!r}")
        if not self.outlier_scale > 0:
            raise ConfigurationError(
                f"outlier_scale must be positive, got {self.outlier_scale!r}")
        if not 0 <= self.missing_fraction < 1:
            raise ConfigurationError(
                f"missing_fraction must lie in [0, 1), "
                f"got {self.missing_fraction!r}")
        if self.missing_fraction >= 1.0 - 1.0 / self.d:
            raise ConfigurationError(
                f"missing_fraction {self.missing_fraction} with d={self.d} "
                f"forces empty rows persistently (needs < 1 - 1/d)")
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigurationError(
                f"seed must be a nonnegative integer, got {self.seed!r}")


def _generic_rotation(d: int) -> np.ndarray:
    """Fixed orthogonal matrix mixing all d axes, identical across calls."""
    if d == 1:
        return np.ones((1, 1))
    rng = np.random.default_rng(853904)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def simplex_means(n_clusters: int, d: int, separation: float) -> np.ndarray:
    """Mean matrix (K, d) with pairwise distances equal to separation.

    K - 1 <= d admits a centered regular simplex, which is exact.  When the
    dimension is too small for a simplex the means fall back to equal
    spacing on a circle (d >= 2) or a line (d == 1); only adjacent pairs
    sit at the requested separation then.  A fixed generic rotation spreads
    the arrangement over every feature axis, so masking one coordinate
    never erases a pair's entire separation.
    """
    if n_clusters == 1:
        return np.zeros((1, d))
    if n_clusters - 1 <= d:
        # Vertices e_1..e_K of R^K, centered, live in a (K-1)-subspace with
        # all pairwise distances sqrt(2); rotate onto the first K-1 axes.
        vertices = np.eye(n_clusters) - 1.0 / n_clusters
        _, _, vt = np.linalg.svd(vertices, full_matrices=False)
        reduced = vertices @ vt[: n_clusters - 1].T
        means = np.zeros((n_clusters, d))
        means[:, : n_clusters - 1] = reduced * (separation / np.sqrt(2.0))
    elif d == 1:
        return (separation * np.arange(n_clusters, dtype=float)
                - separation * (n_clusters - 1) / 2.0)[:, None]
    else:
        radius = separation / (2.0 * np.sin(np.pi / n_clusters))
        angles = 2.0 * np.pi * np.arange(n_clusters) / n_clusters
        means = np.zeros((n_clusters, d))
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    return means @ _generic_rotation(d).T


def generate(spec: SyntheticSpec):
    """Draw one dataset from the spec.

    Returns (dataset, labels, full_values): the masked dataset, the true
    row labels with -1 marking outliers, and the unmasked value matrix.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = simplex_means(spec.K, spec.d, spec.separation)

    assignments = rng.integers(0, spec.K, size=spec.J)
    values = means[assignments] + rng.standard_normal((spec.J, spec.d))
    labels = assignments.astype(int)

    n_outliers = int(round(spec.outlier_fraction * spec.J))
    if n_outliers:
        which = rng.choice(spec.J, size=n_outliers, replace=False)
        half_width = spec.outlier_scale * spec.separation
        values[which] = rng.uniform(
            -half_width, half_width, size=(n_outliers, spec.d))
        labels[which] = -1

    # validate() bounds missing_fraction below 1 - 1/d, so a redraw finds an
    # observed cell quickly; the cap only guards against a broken RNG.
    mask = rng.random((spec.J, spec.d)) >= spec.missing_fraction
    for j in np.flatnonzero(~mask.any(axis=1)):
        for attempt in range(RESAMPLE_LIMIT):
            redraw = rng.random(spec.d) >= spec.missing_fraction
            if redraw.any():
                mask[j] = redraw
                break
        else:
            raise ConfigurationError(
                f"could not draw a row with an observed cell after "
                f"{RESAMPLE_LIMIT} attempts (missing_fraction "
                f"{spec.missing_fraction})")

    masked = np.where(mask, values, np.nan)
    return MaskedDataset(masked, mask), labels, values

"""Optional figure rendering for the CLI's --figures flag.

Everything here is additive: the delimited outputs are the artifact of
record and the figures are a convenience rendered next to them.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["save_elbo_trace_figure", "save_compare_figure"]


def save_elbo_trace_figure(trace, path) -> str:
    """Line plot of the bound per iteration; returns the file path."""
    iterations = [it for it, _ in trace]
    values = [value for _, value in trace]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(iterations, values, marker=".", lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("evidence lower bound")
    ax.set_title("fit trace")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_compare_figure(rows, path) -> str:
    """Per-method ARI summary: median bars with per-seed points.

    rows: iterables of (method, seed, ari, ...) as written to the compare
    report; non-finite or absent ARIs are skipped.
    """
    by_method: dict = {}
    for row in rows:
        method, ari = str(row[0]), row[2]
        if ari is None:
            continue
        ari = float(ari)
        if np.isfinite(ari):
            by_method.setdefault(method, []).append(ari)
    methods = list(by_method)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for i, method in enumerate(methods):
        values = by_method[method]
        ax.bar(i, float(np.median(values)), width=0.6, alpha=0.55)
        ax.plot([i] * len(values), values, "k.", ms=5)
    ax.set_xticks(range(len(methods)))
    ax.set_xticklabels(methods)
    ax.set_ylabel("adjusted Rand index")
    ax.set_title("median ARI by method (dots are seeds)")
    ax.set_ylim(bottom=min(0.0, *(min(v) for v in by_method.values()), 0.0))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def figure_path(directory, name) -> str:
    os.makedirs(directory, exist_ok=True)
    return os.path.join(directory, name)

"""Clustering and imputation metrics against ground truth.

Rows whose true label is -1 are contamination: they are excluded from the
agreement metrics and scored separately through the outlier AUROC, which
treats a LOW outlier score as a detection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.stats

__all__ = [
    "EvalReport",
    "adjusted_rand_index",
    "majority_map_accuracy",
    "outlier_auroc",
    "imputation_rmse",
    "evaluate",
]

OUTLIER_LABEL = -1


@dataclass
class EvalReport:
    """Metric bundle; absent metrics are None."""

    ari: float
    accuracy: float
    auroc: float | None = None
    rmse: float | None = None
    diagnostics: list = field(default_factory=list)


def _pair_count(counts: np.ndarray) -> float:
    return float(np.sum(counts * (counts - 1.0) / 2.0))


def adjusted_rand_index(predicted, truth, diagnostics=None):
    """Pair-counting ARI; the degenerate 0/0 case is defined as 0.

    When both labelings are trivial (one cluster, or all singletons) the
    adjustment denominator vanishes; we report 0 with a diagnostic rather
    than following the convention of some libraries that score it 1, since
    a trivial clustering carries no signal worth crediting.
    """
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(
            f"label vectors differ in length: {predicted.shape} vs "
            f"{truth.shape}")
    n = predicted.shape[0]
    if n < 2:
        if diagnostics is not None:
            diagnostics.append(
                "adjusted Rand index has no pairs on fewer than 2 rows, "
                "reporting 0")
        return 0.0
    pred_values, pred_idx = np.unique(predicted, return_inverse=True)
    true_values, true_idx = np.unique(truth, return_inverse=True)
    table = np.zeros((pred_values.size, true_values.size))
    np.add.at(table, (pred_idx, true_idx), 1.0)

    index = _pair_count(table)
    sum_rows = _pair_count(table.sum(axis=1))
    sum_cols = _pair_count(table.sum(axis=0))
    total = n * (n - 1.0) / 2.0
    expected = sum_rows * sum_cols / total
    maximum = 0.5 * (sum_rows + sum_cols)
    denom = maximum - expected
    if denom == 0.0:
        if diagnostics is not None:
            diagnostics.append(
                "adjusted Rand index degenerate (single cluster or all "
                "singletons on both sides), reporting 0")
        return 0.0
    return float((index - expected) / denom)


def majority_map_accuracy(predicted, truth) -> float:
    """Accuracy after mapping each predicted cluster to its majority label.

    Ties go to the smallest true label so the metric is deterministic.
    """
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(
            f"label vectors differ in length: {predicted.shape} vs "
            f"{truth.shape}")
    if predicted.size == 0:
        return 0.0
    correct = 0
    true_values = np.unique(truth)
    for cluster in np.unique(predicted):
        members = predicted == cluster
        counts = np.array([(truth[members] == t).sum() for t in true_values])
        correct += counts[int(np.argmax(counts))]
    return float(correct) / predicted.size


def outlier_auroc(scores, is_outlier, diagnostics=None):
    """AUROC of low-score-means-outlier detection via the rank statistic.

    Ties get average ranks, contributing 1/2 per tied pair.  Returns None
    when either class is empty.
    """
    scores = np.asarray(scores, dtype=float)
    is_outlier = np.asarray(is_outlier, dtype=bool)
    n_out = int(is_outlier.sum())
    n_in = int(scores.size - n_out)
    if n_out == 0 or n_in == 0:
        if diagnostics is not None:
            diagnostics.append(
                "outlier AUROC undefined: one of the classes is empty")
        return None
    ranks = scipy.stats.rankdata(scores)
    u_high = float(ranks[is_outlier].sum()) - n_out * (n_out + 1.0) / 2.0
    return 1.0 - u_high / (n_out * n_in)


def imputation_rmse(imputed, true_values, missing_mask) -> float:
    """Root mean squared error over the originally missing cells."""
    imputed = np.asarray(imputed, dtype=float)
    true_values = np.asarray(true_values, dtype=float)
    missing_mask = np.asarray(missing_mask, dtype=bool)
    if not missing_mask.any():
        raise ValueError("no missing cells to score")
    dev = imputed[missing_mask] - true_values[missing_mask]
    return float(np.sqrt(np.mean(dev * dev)))


def evaluate(predicted, truth, outlier_scores=None, imputed=None,
             true_values=None, missing_mask=None) -> EvalReport:
    """Full metric bundle for one method on one dataset.

    ARI and accuracy use only rows with a genuine cluster label (truth
    != -1); AUROC needs outlier_scores and at least one contaminated row;
    RMSE needs the imputed matrix, the uncontaminated values, and the
    missing-cell mask.
    """
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    diagnostics = []
    inlier = truth != OUTLIER_LABEL
    ari = adjusted_rand_index(predicted[inlier], truth[inlier], diagnostics)
    accuracy = majority_map_accuracy(predicted[inlier], truth[inlier])

    auroc = None
    if outlier_scores is not None:
        auroc = outlier_auroc(outlier_scores, ~inlier, diagnostics)

    rmse = None
    if imputed is not None:
        if true_values is None or missing_mask is None:
            raise ValueError(
                "imputation RMSE needs true_values and missing_mask")
        missing_mask = np.asarray(missing_mask, dtype=bool)
        if missing_mask.any():
            rmse = imputation_rmse(imputed, true_values, missing_mask)
        else:
            diagnostics.append("no missing cells, imputation RMSE absent")

    return EvalReport(ari, accuracy, auroc, rmse, diagnostics)

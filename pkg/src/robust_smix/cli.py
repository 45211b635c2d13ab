"""Command-line surface: fit, predict, impute, generate, eval, compare.

Every numeric table is CSV with 17-significant-digit floats, so reruns
with the same seeds are byte-identical and diffable.  The optional
--figures flag renders PNG summaries next to the delimited outputs.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import engine
from .baseline import gmm_em_baseline
from .data_io import (ParseError, fmt, load_config_file, load_csv,
                      read_table, save_csv, write_table)
from .evaluation import evaluate
from .model import (ConfigurationError, FitConfig, MaskedDataset,
                    default_priors, load_model, save_model)
from .synthetic import SyntheticSpec, generate

__all__ = ["main", "build_fit_setup", "build_synthetic_spec"]

_CONFIG_INT_KEYS = ("max_iterations", "seed")
_CONFIG_FLOAT_KEYS = ("elbo_rel_tolerance", "min_responsibility_floor")
_CONFIG_STR_KEYS = ("init_method", "marginal_mode", "model_kind",
                    "scatter_mode")
_PRIOR_SCALAR_KEYS = ("kappa0", "eta0", "gamma0", "p0", "q0", "s0", "r0")
_SPEC_INT_KEYS = ("J", "d", "K", "seed")
_SPEC_FLOAT_KEYS = ("separation", "outlier_fraction", "outlier_scale",
                    "missing_fraction")

COMPARE_METHODS = ("student", "gaussian", "gmm_em")
REPORT_HEADER = ("ari", "accuracy", "auroc", "rmse")


def _typed(value: str, kind, key: str):
    try:
        return kind(value)
    except ValueError:
        raise ConfigurationError(
            f"config key {key!r}: cannot parse {value!r} as {kind.__name__}")


def _float_list(value: str, key: str) -> np.ndarray:
    return np.array([_typed(cell.strip(), float, key)
                     for cell in value.split(",")])


def build_fit_setup(entries: dict, data: MaskedDataset, n_clusters: int):
    """Priors and config from flat key=value entries.

    Keys mirror the FitConfig and PriorSpec field names; mu0 is a
    comma-separated vector, sigma0 either a single value (scaled identity)
    or all d*d entries in row-major order.
    """
    config = FitConfig()
    priors = default_priors(data, n_clusters)
    d = data.n_features
    for key, value in entries.items():
        if key in _CONFIG_INT_KEYS:
            setattr(config, key, _typed(value, int, key))
        elif key in _CONFIG_FLOAT_KEYS:
            setattr(config, key, _typed(value, float, key))
        elif key in _CONFIG_STR_KEYS:
            setattr(config, key, value)
        elif key in _PRIOR_SCALAR_KEYS:
            setattr(priors, key, _typed(value, float, key))
        elif key == "mu0":
            mu0 = _float_list(value, key)
            if mu0.shape != (d,):
                raise ConfigurationError(
                    f"mu0 must list {d} values, got {mu0.size}")
            priors.mu0 = mu0
        elif key == "sigma0":
            flat = _float_list(value, key)
            if flat.size == 1:
                priors.sigma0 = float(flat[0]) * np.eye(d)
            elif flat.size == d * d:
                priors.sigma0 = flat.reshape(d, d)
            else:
                raise ConfigurationError(
                    f"sigma0 must be one value or {d * d} values, "
                    f"got {flat.size}")
        elif key == "n_clusters":
            raise ConfigurationError(
                "set the cluster count with --k, not the config file")
        else:
            raise ConfigurationError(f"unknown config key {key!r}")
    return priors, config


def build_synthetic_spec(entries: dict) -> SyntheticSpec:
    spec = SyntheticSpec(J=1, d=1, K=1)
    seen = set()
    for key, value in entries.items():
        if key in _SPEC_INT_KEYS:
            setattr(spec, key, _typed(value, int, key))
        elif key in _SPEC_FLOAT_KEYS:
            setattr(spec, key, _typed(value, float, key))
        else:
            raise ConfigurationError(f"unknown generator key {key!r}")
        seen.add(key)
    for required in ("J", "d", "K"):
        if required not in seen:
            raise ConfigurationError(f"generator spec must set {required}")
    return spec


def _maybe_figures(args):
    if getattr(args, "figures", None) is None:
        return None
    from . import plots
    return plots


def cmd_fit(args) -> int:
    data, _ = load_csv(args.input)
    entries = load_config_file(args.config) if args.config else {}
    priors, config = build_fit_setup(entries, data, args.k)
    if args.seed is not None:
        config.seed = args.seed
    result = engine.fit(data, priors, config)
    save_model(result, args.out)
    if args.trace:
        write_table(args.trace, ("iteration", "elbo"),
                    [(it, value) for it, value in result.elbo_trace])
    plots = _maybe_figures(args)
    if plots is not None:
        figure = plots.save_elbo_trace_figure(
            result.elbo_trace, plots.figure_path(args.figures, "elbo_trace.png"))
        print(f"figure: {figure}")
    final = result.elbo_trace[-1][1]
    print(f"fit: {result.n_iterations} iterations, "
          f"converged={result.converged}, elbo={fmt(final)}")
    for line in result.diagnostics:
        print(f"diagnostic: {line}")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    data, _ = load_csv(args.input)
    pred = engine.predict(model, data)
    n_clusters = pred.responsibilities.shape[1]
    header = ["row", "label", "score"] + [f"r{k}" for k in range(n_clusters)]
    rows = [[j, int(pred.labels[j]), pred.outlier_score[j]]
            + list(pred.responsibilities[j]) for j in range(data.n_rows)]
    write_table(args.out, header, rows)
    print(f"predict: {data.n_rows} rows -> {args.out}")
    return 0


def cmd_impute(args) -> int:
    model = load_model(args.model)
    data, names = load_csv(args.input)
    result = engine.impute(model, data)
    header = list(names) + [f"std_{name}" for name in names]
    rows = []
    for j in range(data.n_rows):
        stds = [None if np.isnan(result.std[j, i]) else result.std[j, i]
                for i in range(data.n_features)]
        rows.append(list(result.completed[j]) + stds)
    write_table(args.out, header, rows)
    print(f"impute: {data.n_rows} rows -> {args.out}")
    for line in result.diagnostics:
        print(f"diagnostic: {line}")
    return 0


def cmd_generate(args) -> int:
    spec = build_synthetic_spec(load_config_file(args.spec))
    data, labels, full_values = generate(spec)
    save_csv(data, args.out)
    if args.truth:
        header = ["label"] + [f"x{i}" for i in range(spec.d)]
        rows = [[int(labels[j])] + list(full_values[j])
                for j in range(spec.J)]
        write_table(args.truth, header, rows)
    n_missing = int((~data.mask).sum())
    n_outliers = int((labels == -1).sum())
    print(f"generate: J={spec.J} d={spec.d} K={spec.K}, "
          f"{n_outliers} outliers, {n_missing} missing cells -> {args.out}")
    return 0


def _read_labels_file(path):
    """Predicted labels and outlier scores from a predict output table."""
    header, rows = read_table(path)
    if header[:3] != ["row", "label", "score"]:
        raise ParseError(
            f"{path}: expected columns row,label,score,..., got {header[:3]}")
    labels = np.empty(len(rows), dtype=int)
    scores = np.empty(len(rows))
    for line, row in enumerate(rows, start=2):
        try:
            labels[line - 2] = int(row[1])
            scores[line - 2] = float(row[2])
        except (ValueError, IndexError):
            raise ParseError(f"{path}: line {line}: bad label/score row")
    return labels, scores


def _read_truth_file(path):
    """True labels and the uncontaminated full value matrix."""
    header, rows = read_table(path)
    if not header or header[0] != "label":
        raise ParseError(
            f"{path}: expected a leading label column, got {header[:1]}")
    d = len(header) - 1
    labels = np.empty(len(rows), dtype=int)
    values = np.empty((len(rows), d))
    for line, row in enumerate(rows, start=2):
        if len(row) != d + 1:
            raise ParseError(
                f"{path}: line {line}: expected {d + 1} cells, got {len(row)}")
        try:
            labels[line - 2] = int(row[0])
            values[line - 2] = [float(cell) for cell in row[1:]]
        except ValueError:
            raise ParseError(f"{path}: line {line}: bad truth row")
    return labels, values


def _read_completed_file(path):
    """Imputed values and the recovered missing mask from an impute table.

    The std columns are empty exactly at originally observed cells, so the
    mask survives the round trip through the file.
    """
    header, rows = read_table(path)
    if len(header) % 2 != 0:
        raise ParseError(
            f"{path}: expected value columns plus std columns, "
            f"got {len(header)} columns")
    d = len(header) // 2
    values = np.empty((len(rows), d))
    missing = np.zeros((len(rows), d), dtype=bool)
    for line, row in enumerate(rows, start=2):
        if len(row) != 2 * d:
            raise ParseError(
                f"{path}: line {line}: expected {2 * d} cells, got {len(row)}")
        try:
            values[line - 2] = [float(cell) for cell in row[:d]]
        except ValueError:
            raise ParseError(f"{path}: line {line}: bad value cell")
        missing[line - 2] = [cell.strip() != "" for cell in row[d:]]
    return values, missing


def _report_row(report):
    return [report.ari, report.accuracy,
            None if report.auroc is None else report.auroc,
            None if report.rmse is None else report.rmse]


def cmd_eval(args) -> int:
    labels, scores = _read_labels_file(args.pred)
    truth, true_values = _read_truth_file(args.truth)
    if labels.shape[0] != truth.shape[0]:
        raise ConfigurationError(
            f"prediction has {labels.shape[0]} rows but truth has "
            f"{truth.shape[0]}")
    imputed = missing = None
    if args.imputed:
        imputed, missing = _read_completed_file(args.imputed)
        if imputed.shape != true_values.shape:
            raise ConfigurationError(
                f"imputed shape {imputed.shape} does not match truth "
                f"shape {true_values.shape}")
    report = evaluate(labels, truth, outlier_scores=scores, imputed=imputed,
                      true_values=true_values, missing_mask=missing)
    write_table(args.out, REPORT_HEADER, [_report_row(report)])
    print(f"eval: ari={fmt(report.ari)} accuracy={fmt(report.accuracy)}"
          + (f" auroc={fmt(report.auroc)}" if report.auroc is not None else "")
          + (f" rmse={fmt(report.rmse)}" if report.rmse is not None else ""))
    for line in report.diagnostics:
        print(f"diagnostic: {line}")
    return 0


def _compare_one(method: str, data: MaskedDataset, n_clusters: int,
                 seed: int):
    """Labels, outlier scores (or None), and imputed values (or None)."""
    has_missing = not data.mask.all()
    if method == "gmm_em":
        labels, _ = gmm_em_baseline(data, n_clusters, seed=seed,
                                    allow_mean_impute=True)
        return labels, None, data.mean_imputed() if has_missing else None
    config = FitConfig(model_kind=method, seed=seed)
    priors = default_priors(data, n_clusters)
    # A proper shape prior (r0 > s0) keeps the tail-weight posterior bounded;
    # with the improper default the shape can drift upward on clean clusters.
    priors.r0 = 2.0
    result = engine.fit(data, priors, config)
    pred = engine.predict(result, data)
    imputed = engine.impute(result, data).completed if has_missing else None
    return pred.labels, pred.outlier_score, imputed


def cmd_compare(args) -> int:
    data, _ = load_csv(args.input)
    truth, true_values = _read_truth_file(args.truth)
    if truth.shape[0] != data.n_rows:
        raise ConfigurationError(
            f"truth has {truth.shape[0]} rows but data has {data.n_rows}")
    if args.seeds < 1:
        raise ConfigurationError(f"--seeds must be >= 1, got {args.seeds}")
    missing = ~data.mask
    rows = []
    for seed in range(args.seeds):
        for method in COMPARE_METHODS:
            labels, scores, imputed = _compare_one(
                method, data, args.k, seed)
            report = evaluate(labels, truth, outlier_scores=scores,
                              imputed=imputed, true_values=true_values,
                              missing_mask=missing if imputed is not None
                              else None)
            rows.append([method, seed] + _report_row(report))
    write_table(args.out, ("method", "seed") + REPORT_HEADER, rows)
    plots = _maybe_figures(args)
    if plots is not None:
        figure = plots.save_compare_figure(
            rows, plots.figure_path(args.figures, "compare_ari.png"))
        print(f"figure: {figure}")
    for method in COMPARE_METHODS:
        aris = [row[2] for row in rows if row[0] == method]
        print(f"compare: {method} median ari {fmt(np.median(aris))} "
              f"over {args.seeds} seeds")
    print(f"compare: report -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robust-smix",
        description="Variational mixture fitting that tolerates missing "
                    "cells and outliers, with a classical GMM-EM baseline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a mixture to a CSV dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--k", required=True, type=int)
    p.add_argument("--config", default=None,
                   help="flat key=value file; keys mirror the fit "
                        "configuration and prior field names")
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--trace", default=None, help="ELBO trace CSV path")
    p.add_argument("--seed", default=None, type=int,
                   help="override the config seed")
    p.add_argument("--figures", default=None,
                   help="directory for PNG figures")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="classify rows with a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("impute", help="fill missing cells with a model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("generate", help="draw a synthetic benchmark")
    p.add_argument("--spec", required=True,
                   help="flat key=value file with J, d, K, separation, "
                        "outlier_fraction, outlier_scale, missing_fraction, "
                        "seed")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", default=None,
                   help="write true labels and values here")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score predictions against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--imputed", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "compare",
        help="run student VB, gaussian VB, and GMM-EM over several seeds")
    p.add_argument("--input", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--k", required=True, type=int)
    p.add_argument("--seeds", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--figures", default=None,
                   help="directory for PNG figures")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

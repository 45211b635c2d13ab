"""Delimited-text ingestion and emission, plus the flat key=value config.

All numeric output is written with 17 significant digits so that a write
followed by a read reproduces every float bit for bit; missing cells are
empty fields on the way out and any configured marker on the way in.
"""

from __future__ import annotations

import csv

import numpy as np

from .model import MaskedDataset

__all__ = [
    "ParseError",
    "DEFAULT_MISSING_MARKERS",
    "fmt",
    "load_csv",
    "save_csv",
    "write_table",
    "read_table",
    "parse_config_text",
    "load_config_file",
]

DEFAULT_MISSING_MARKERS = frozenset({"", "NaN", "NA"})


class ParseError(ValueError):
    """A delimited file or config file could not be interpreted."""


def fmt(x) -> str:
    """17-significant-digit decimal text; round-trips every finite float."""
    return format(float(x), ".17g")


def load_csv(path, missing_markers=DEFAULT_MISSING_MARKERS):
    """Read a rectangular CSV with a header row into a MaskedDataset.

    Cells equal to a marker (after stripping surrounding blanks) become
    missing.  Returns (dataset, feature_names).
    """
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header row")
        names = [cell.strip() for cell in header]
        d = len(names)
        values = []
        mask = []
        for line, row in enumerate(reader, start=2):
            if len(row) != d:
                raise ParseError(
                    f"{path}: line {line}: expected {d} cells, got {len(row)}")
            row_values = np.empty(d)
            row_mask = np.empty(d, dtype=bool)
            for col, cell in enumerate(row):
                cell = cell.strip()
                if cell in missing_markers:
                    row_values[col] = np.nan
                    row_mask[col] = False
                    continue
                try:
                    row_values[col] = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: line {line}, column {col + 1} "
                        f"({names[col]}): cannot parse {cell!r}")
                if not np.isfinite(row_values[col]):
                    raise ParseError(
                        f"{path}: line {line}, column {col + 1} "
                        f"({names[col]}): non-finite value {cell!r}")
                row_mask[col] = True
            values.append(row_values)
            mask.append(row_mask)
    values = np.array(values) if values else np.empty((0, d))
    mask = np.array(mask) if mask else np.empty((0, d), dtype=bool)
    return MaskedDataset(values, mask), names


def save_csv(dataset: MaskedDataset, path, feature_names=None) -> None:
    """Write a MaskedDataset; missing cells become empty fields."""
    d = dataset.n_features
    if feature_names is None:
        feature_names = [f"x{i}" for i in range(d)]
    if len(feature_names) != d:
        raise ValueError(
            f"expected {d} feature names, got {len(feature_names)}")
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(feature_names)
        for j in range(dataset.n_rows):
            writer.writerow([
                fmt(dataset.values[j, i]) if dataset.mask[j, i] else ""
                for i in range(d)])


def write_table(path, header, rows) -> None:
    """CSV table; floats through fmt, None as an empty field."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            out = []
            for cell in row:
                if cell is None:
                    out.append("")
                elif isinstance(cell, (float, np.floating)):
                    out.append(fmt(cell))
                else:
                    out.append(str(cell))
            writer.writerow(out)


def read_table(path):
    """Inverse of write_table: returns (header, list of string rows)."""
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header row")
        return header, [row for row in reader]


def parse_config_text(text, path="<config>"):
    """Flat key=value lines into a string dict.

    Blank lines and lines starting with # are skipped; keys must be unique.
    """
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(
                f"{path}: line {line_no}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ParseError(f"{path}: line {line_no}: empty key")
        if key in out:
            raise ParseError(f"{path}: line {line_no}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config_file(path):
    with open(path, "r", encoding="utf-8") as handle:
        return parse_config_text(handle.read(), path=str(path))

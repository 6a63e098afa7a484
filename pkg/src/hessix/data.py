"""Tabular dataset container and CSV I/O.

CSV contract: UTF-8, header row with feature names, decimal-point floats,
no missing values.  The last column is the target unless a target name is
given.  Lines starting with '#' are metadata comments and are skipped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent tabular input."""


@dataclass
class Dataset:
    """Design matrix, target vector and column names; houses the empirical p(x)."""

    x: np.ndarray
    y: np.ndarray
    feature_names: list = field(default_factory=list)
    target_name: str = "target"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.ndim != 2:
            raise DataError(f"design matrix must be 2-D, got shape {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise DataError(
                f"target length {self.y.shape} does not match {self.x.shape[0]} rows")
        if not self.feature_names:
            self.feature_names = [f"x{i + 1}" for i in range(self.x.shape[1])]
        if len(self.feature_names) != self.x.shape[1]:
            raise DataError("feature name count does not match column count")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def with_target(self, y: np.ndarray) -> "Dataset":
        return Dataset(self.x.copy(), np.asarray(y, dtype=float),
                       list(self.feature_names), self.target_name)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], list(self.feature_names),
                       self.target_name)


def read_csv(path, target: str | None = None) -> Dataset:
    """Load a dataset CSV.  Missing values are a hard error, not imputed."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh)
                if r and not (r[0].startswith("#"))]
    if not rows:
        raise DataError(f"{path}: empty CSV")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    if target is None:
        target = header[-1]
    if target not in header:
        raise DataError(f"{path}: target column {target!r} not in header")
    t_idx = header.index(target)
    feat_idx = [i for i in range(len(header)) if i != t_idx]
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    values = np.empty((len(body), len(header)))
    for r, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r + 2} has {len(row)} fields, "
                            f"expected {len(header)}")
        for c, cell in enumerate(row):
            cell = cell.strip()
            if cell == "":
                raise DataError(f"{path}: missing value at row {r + 2}, "
                                f"column {header[c]!r}")
            try:
                values[r, c] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric value {cell!r} at row "
                                f"{r + 2}, column {header[c]!r}") from None
        if not np.all(np.isfinite(values[r])):
            raise DataError(f"{path}: non-finite value at row {r + 2}")
    return Dataset(values[:, feat_idx], values[:, t_idx],
                   [header[i] for i in feat_idx], target)


def write_csv(dataset: Dataset, path, meta: dict | None = None) -> None:
    """Write a dataset CSV, optionally with '# key=value' metadata comments."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if meta:
            for k in sorted(meta):
                fh.write(f"# {k}={meta[k]}\n")
        w = csv.writer(fh)
        w.writerow(list(dataset.feature_names) + [dataset.target_name])
        for i in range(dataset.n):
            w.writerow([repr(float(v)) for v in dataset.x[i]]
                       + [repr(float(dataset.y[i]))])


def split_three(dataset: Dataset, frac_train=0.7, frac_val=0.2, rng=None):
    """Split rows into train/val/test, shuffled when an RngStream is given."""
    n = dataset.n
    idx = np.arange(n)
    if rng is not None:
        idx = rng.generator().permutation(n)
    n_train = int(round(frac_train * n))
    n_val = int(round(frac_val * n))
    if n_train < 1 or n_val < 1 or n_train + n_val >= n:
        raise DataError(f"cannot split {n} rows into "
                        f"({frac_train}, {frac_val}, rest)")
    return (dataset.subset(idx[:n_train]),
            dataset.subset(idx[n_train:n_train + n_val]),
            dataset.subset(idx[n_train + n_val:]))

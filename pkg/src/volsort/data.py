"""Datasets: the synthetic v-shape generator, CSV ingestion, random
four-way splits and train-fitted standardization."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAPER_FRACTIONS = (0.384, 0.256, 0.16, 0.20)  # train, calibration, validation, test
SYNTHETIC_X_VALUES = (1.5, 2.0, 2.5)


class IngestionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    groups: Optional[np.ndarray] = None
    provenance: str = "synthetic"
    dropped_rows: int = 0

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=np.float64))
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError(f"X has {self.X.shape[0]} rows but Y has {self.Y.shape[0]}")
        if self.groups is not None and len(self.groups) != self.X.shape[0]:
            raise ValueError("group labels must have one entry per row")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.Y.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        groups = None if self.groups is None else self.groups[idx]
        return Dataset(self.X[idx], self.Y[idx], groups, self.provenance)


def generate_synthetic(n: int, seed: int) -> Dataset:
    """V-shaped 2-d responses whose arm height scales with a discrete x."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.choice(np.array(SYNTHETIC_X_VALUES), size=n)
    t = rng.uniform(-1.0, 1.0, size=n)
    eps = rng.standard_normal((n, 2))
    y1 = t + 0.1 * eps[:, 0]
    y2 = x * np.abs(t) + 0.1 * eps[:, 1]
    return Dataset(x[:, None], np.column_stack([y1, y2]), groups=x.copy(),
                   provenance=f"synthetic(n={n},seed={seed})")


def load_csv(path, d: int) -> Dataset:
    """Read ``x0..x{p-1},y0..y{d-1}``; rows with non-finite cells are dropped."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: file not found")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        p = len(header) - d
        if p < 1:
            raise IngestionError(f"{path}: header has {len(header)} columns, need at least {d + 1}")
        expected = [f"x{j}" for j in range(p)] + [f"y{j}" for j in range(d)]
        for col, (got, want) in enumerate(zip(header, expected)):
            if got != want:
                raise IngestionError(f"{path}: header column {col} is {got!r}, expected {want!r}")
        rows = []
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            vals = []
            for col, cell in enumerate(row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise IngestionError(
                        f"{path}: non-numeric cell {cell!r} at row {lineno}, column {col} ({header[col]})"
                    ) from None
            if not all(math.isfinite(v) for v in vals):
                dropped += 1
                continue
            rows.append(vals)
    if dropped:
        logger.warning("%s: dropped %d row(s) with non-finite values", path, dropped)
    arr = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    return Dataset(arr[:, :p], arr[:, p:], provenance=str(path), dropped_rows=dropped)


@dataclass
class SplitIndices:
    train: np.ndarray
    calibration: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def as_tuple(self):
        return self.train, self.calibration, self.validation, self.test


def _largest_remainder(n: int, fractions: Sequence[float]):
    raw = [f * n for f in fractions]
    sizes = [int(math.floor(r)) for r in raw]
    left = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:left]:
        sizes[i] += 1
    return sizes


def split(dataset: Dataset, fractions: Sequence[float] = PAPER_FRACTIONS, seed: int = 0) -> SplitIndices:
    if len(fractions) != 4:
        raise ConfigurationError("need four fractions: train, calibration, validation, test")
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigurationError(f"fractions must be non-negative and sum to 1, got {list(fractions)}")
    sizes = _largest_remainder(dataset.n, fractions)
    names = ("train", "calibration", "validation", "test")
    for name, s in zip(names, sizes):
        if s == 0:
            raise ConfigurationError(f"{name} split is empty (n={dataset.n})")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    bounds = np.cumsum([0, *sizes])
    return SplitIndices(*(perm[a:b] for a, b in zip(bounds[:-1], bounds[1:])))


@dataclass
class StandardizationStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray


def fit_stats(dataset: Dataset, train_idx) -> StandardizationStats:
    X, Y = dataset.X[train_idx], dataset.Y[train_idx]
    return StandardizationStats(
        X.mean(axis=0), np.maximum(X.std(axis=0), 1e-12),
        Y.mean(axis=0), np.maximum(Y.std(axis=0), 1e-12),
    )


def apply_stats(dataset: Dataset, stats: StandardizationStats) -> Dataset:
    return replace(
        dataset,
        X=(dataset.X - stats.x_mean) / stats.x_std,
        Y=(dataset.Y - stats.y_mean) / stats.y_std,
    )


def invert_stats(dataset: Dataset, stats: StandardizationStats) -> Dataset:
    return replace(
        dataset,
        X=dataset.X * stats.x_std + stats.x_mean,
        Y=dataset.Y * stats.y_std + stats.y_mean,
    )


def write_csv(dataset: Dataset, path) -> None:
    header = [f"x{j}" for j in range(dataset.p)] + [f"y{j}" for j in range(dataset.d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.hstack([dataset.X, dataset.Y]):
            w.writerow([repr(float(v)) for v in row])

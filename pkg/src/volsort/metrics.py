"""Coverage, region size and multi-seed aggregation."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np


@dataclass
class VolumeGrid:
    """Fixed probe set over a bounding box used to measure region size.

    ``kind == "grid"``: a regular lattice including both bounds, and
    ``cell_volume = prod(range_j / (count_j - 1))``. ``kind == "monte_carlo"``:
    uniform probes in the box with ``cell_volume = box volume / n_probes``.
    """

    lower: np.ndarray
    upper: np.ndarray
    counts: tuple
    kind: str = "grid"
    seed: Optional[int] = None
    points: np.ndarray = field(init=False, repr=False)
    cell_volume: float = field(init=False)

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("grid bounds must be finite")
        if np.any(self.upper <= self.lower):
            raise ValueError("grid upper bounds must exceed lower bounds")
        if self.kind == "grid":
            self.counts = tuple(int(c) for c in self.counts)
            if len(self.counts) != len(self.lower) or min(self.counts) < 2:
                raise ValueError("need at least 2 grid points per dimension")
            axes = [np.linspace(lo, hi, c) for lo, hi, c in zip(self.lower, self.upper, self.counts)]
            mesh = np.meshgrid(*axes, indexing="ij")
            self.points = np.column_stack([m.ravel() for m in mesh])
            self.cell_volume = float(np.prod((self.upper - self.lower) / (np.array(self.counts) - 1)))
        elif self.kind == "monte_carlo":
            n = int(self.counts[0]) if np.ndim(self.counts) else int(self.counts)
            self.counts = (n,)
            rng = np.random.default_rng(self.seed)
            self.points = self.lower + (self.upper - self.lower) * rng.random((n, len(self.lower)))
            self.cell_volume = float(np.prod(self.upper - self.lower) / n)
        else:
            raise ValueError(f"unknown grid kind {self.kind!r}")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return len(self.lower)

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "lower": [float(v) for v in self.lower],
            "upper": [float(v) for v in self.upper],
            "counts": list(self.counts),
            "seed": self.seed,
            "cell_volume": self.cell_volume,
            "token": self.token(),
        }

    def token(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(np.ascontiguousarray(self.lower, "<f8").tobytes())
        h.update(np.ascontiguousarray(self.upper, "<f8").tobytes())
        h.update(repr((self.counts, self.seed)).encode())
        return h.hexdigest()[:16]

    @classmethod
    def from_step(cls, lower, upper, step: float) -> "VolumeGrid":
        lower, upper = np.asarray(lower, float), np.asarray(upper, float)
        counts = tuple(int(round((hi - lo) / step)) + 1 for lo, hi in zip(lower, upper))
        return cls(lower, upper, counts)


def make_grid(responses: np.ndarray, points_per_dim: Optional[int] = None, mc_probes: int = 200_000,
              margin: float = 0.1, seed: int = 0) -> VolumeGrid:
    """Bounding-box grid around ``responses`` widened by ``margin`` of the range per side.

    Lattice for d <= 3 (100 points per axis for d <= 2, 40 for d = 3 unless
    overridden); Monte-Carlo probes beyond that.
    """
    responses = np.atleast_2d(responses)
    lo, hi = responses.min(axis=0), responses.max(axis=0)
    pad = margin * np.maximum(hi - lo, 1e-12)
    lo, hi = lo - pad, hi + pad
    d = responses.shape[1]
    if d >= 4:
        return VolumeGrid(lo, hi, (mc_probes,), kind="monte_carlo", seed=seed)
    if points_per_dim is None:
        points_per_dim = 100 if d <= 2 else 40
    return VolumeGrid(lo, hi, (points_per_dim,) * d)


def _contains(region, y) -> bool:
    return bool(region.contains(y))


def marginal_coverage(regions: Sequence, responses: np.ndarray) -> float:
    if len(regions) != len(responses):
        raise ValueError("regions and responses differ in length")
    if not len(regions):
        raise ValueError("no regions")
    return float(np.mean([_contains(r, y) for r, y in zip(regions, responses)]))


def mean_region_size(regions: Sequence, grid: VolumeGrid) -> float:
    """Mean grid count (lattice) or mean volume (Monte-Carlo) over regions."""
    if grid.kind == "grid":
        return float(np.mean([r.volume(grid)[0] for r in regions]))
    return float(np.mean([r.volume(grid)[1] for r in regions]))


def conditional_coverage(regions: Sequence, responses: np.ndarray, labels: Sequence):
    """Coverage per distinct label and the minimum across labels."""
    covered = np.array([_contains(r, y) for r, y in zip(regions, responses)], dtype=float)
    return conditional_coverage_from_flags(covered, labels)


def conditional_coverage_from_flags(covered, labels):
    covered = np.asarray(covered, dtype=float)
    labels = np.asarray(labels)
    if len(labels) != len(covered):
        raise ValueError("every test point needs a label")
    per = {float(g) if np.issubdtype(labels.dtype, np.number) else g: float(covered[labels == g].mean())
           for g in np.unique(labels)}
    return per, min(per.values())


def aggregate(values: Sequence[float]) -> Dict[str, float]:
    vals = np.asarray(values, dtype=float)
    if vals.size == 0:
        raise ValueError("need at least one seed")
    std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return {"mean": float(vals.mean()), "std": std, "n": int(vals.size)}


@dataclass
class MetricsReport:
    """Per-seed metric records for several methods plus their aggregates."""

    records: Dict[str, List[dict]] = field(default_factory=dict)

    def add(self, method: str, seed: int, metrics: dict) -> None:
        for k, v in metrics.items():
            if k in ("coverage", "cond_coverage") and v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{k}={v} outside [0, 1]")
            if k == "size" and v < 0:
                raise ValueError("size must be non-negative")
        self.records.setdefault(method, []).append({"seed": seed, **metrics})

    def aggregates(self) -> Dict[str, Dict[str, Dict[str, float]]]:
        out = {}
        for method, recs in self.records.items():
            keys = [k for k in recs[0] if k != "seed"]
            out[method] = {
                k: aggregate([r[k] for r in recs]) for k in keys
                if all(r.get(k) is not None for r in recs)
            }
        return out

    def table(self) -> str:
        """Human-readable ``mean (std)`` table; coverages rendered in percent."""
        agg = self.aggregates()
        methods = list(agg)
        metrics = []
        for m in methods:
            for k in agg[m]:
                if k not in metrics:
                    metrics.append(k)
        lines = ["metric".ljust(16) + "".join(m.ljust(22) for m in methods)]
        for k in metrics:
            row = k.ljust(16)
            for m in methods:
                a = agg[m].get(k)
                if a is None:
                    row += "-".ljust(22)
                elif "coverage" in k:
                    row += format_mean_std(a["mean"] * 100, a["std"] * 100).ljust(22)
                else:
                    row += format_mean_std(a["mean"], a["std"]).ljust(22)
            lines.append(row)
        return "\n".join(lines)


def format_mean_std(mean: float, std: float) -> str:
    if math.isinf(mean):
        return "inf"
    return f"{mean:.2f} ({std:.2f})"

"""Volume-sorted prediction sets.

Samples from the conditional flow are ranked by ``|det df/dy|`` (largest
first), the top ``K`` become ball centers, and one radius ``gamma`` is fit by
split-conformal calibration on nearest-center distances. ``K`` is picked to
minimise the mean region volume on held-out data.

Every calibration, validation and test point draws its latent samples from
its own generator seeded by ``(seed, stream, index)``, so scores are
exchangeable across points and results do not depend on batching.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .cnf import FlowModel
from .metrics import VolumeGrid

logger = logging.getLogger(__name__)

# rng stream ids: keep point-level draws of different splits independent
STREAM_CALIBRATION = 1
STREAM_SELECTION = 2
STREAM_VALIDATION = 3
STREAM_TEST = 4

_CHUNK_ROWS = 32_768


class UnattainableCoverageWarning(UserWarning):
    pass


def point_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) % 2**64, int(stream), int(index)])


def box_muller(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal draws from uniform pairs via the Box-Muller transform."""
    n = int(np.prod(shape))
    pairs = (n + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1], keeps log finite
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:n].reshape(shape)


@dataclass
class SortedSamples:
    samples: np.ndarray  # (M, d), descending jacobian order
    jacobians: np.ndarray  # (M,)
    x: np.ndarray
    log_jacobians: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.jacobians)

    def top(self, k: int) -> np.ndarray:
        return self.samples[:k]


def _inverse_chunked(flow: FlowModel, z: np.ndarray, x: np.ndarray):
    ys, lds = [], []
    for start in range(0, len(z), _CHUNK_ROWS):
        y, ld = flow.inverse(z[start:start + _CHUNK_ROWS], x[start:start + _CHUNK_ROWS])
        ys.append(y)
        lds.append(ld)
    return np.concatenate(ys), np.concatenate(lds)


def _sort_desc(samples: np.ndarray, logdet: np.ndarray):
    """Sort along the sample axis by logdet descending, ties by draw index."""
    order = np.argsort(-logdet, axis=-1, kind="stable")
    logdet = np.take_along_axis(logdet, order, axis=-1)
    samples = np.take_along_axis(samples, order[..., None], axis=-2)
    return samples, logdet


def sample_sorted(x, M: int, flow: FlowModel, rng) -> SortedSamples:
    """Draw ``M`` latents, map them to response space, sort by |det| descending.

    ``rng`` is a ``numpy.random.Generator`` or anything ``default_rng`` accepts.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    z = box_muller(rng, (M, flow.d))
    y, logdet = flow.inverse(z, np.broadcast_to(x, (M, flow.p)))
    y, logdet = _sort_desc(y, logdet)
    return SortedSamples(y, np.exp(logdet), x, logdet)


def sample_sorted_batch(X: np.ndarray, M: int, flow: FlowModel, seed: int, stream: int,
                        indices=None) -> Tuple[np.ndarray, np.ndarray]:
    """Sorted samples for many inputs at once.

    Point ``i`` uses ``point_rng(seed, stream, indices[i])`` so each row equals
    ``sample_sorted(X[i], M, flow, point_rng(...))`` exactly.
    Returns ``(samples (n, M, d), log_jacobians (n, M))``.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    if indices is None:
        indices = range(n)
    z = np.stack([box_muller(point_rng(seed, stream, i), (M, flow.d)) for i in indices])
    xs = np.repeat(X, M, axis=0)
    y, logdet = _inverse_chunked(flow, z.reshape(n * M, flow.d), xs)
    return _sort_desc(y.reshape(n, M, flow.d), logdet.reshape(n, M))


def _distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Euclidean distances, broadcasting ``points (..., d)`` against ``centers (..., M, d)``."""
    sq = (points[..., None, 0] - centers[..., 0]) ** 2
    for j in range(1, points.shape[-1]):
        sq += (points[..., None, j] - centers[..., j]) ** 2
    return np.sqrt(sq)


def nearest_center_profile(y: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """Prefix-minimum distances: entry ``[..., K-1]`` is the distance to the nearest of the top K."""
    return np.minimum.accumulate(_distances(y, samples), axis=-1)


def calibration_score_matrix(flow: FlowModel, X: np.ndarray, Y: np.ndarray, M: int, seed: int,
                             stream: int = STREAM_CALIBRATION) -> np.ndarray:
    """Scores for every K at once, shape (N, M); column K-1 holds d_i(K)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if len(Y) == 0:
        raise ValueError("calibration set is empty")
    samples, _ = sample_sorted_batch(X, M, flow, seed, stream)
    return nearest_center_profile(Y, samples)


def calibration_scores(flow: FlowModel, K: int, X: np.ndarray, Y: np.ndarray, M: int, seed: int,
                       stream: int = STREAM_CALIBRATION) -> np.ndarray:
    """Distance from each calibration response to the nearest of its own top-K samples."""
    if not 1 <= K <= M:
        raise ValueError(f"need 1 <= K <= M, got K={K}, M={M}")
    return calibration_score_matrix(flow, X, Y, M, seed, stream)[:, K - 1]


def quantile_rank(n: int, alpha: float) -> int:
    """1-based order-statistic index ``ceil((1 - alpha)(n + 1))``."""
    # fuzz absorbs representation error such as (1 - 0.3) * 10 = 7.000000000000001
    return int(math.ceil((1.0 - alpha) * (n + 1) - 1e-9))


def conformal_quantile(scores, alpha: float) -> float:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise ValueError("no scores to calibrate on")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    k = quantile_rank(scores.size, alpha)
    if k > scores.size:
        return math.inf
    return float(np.partition(scores, k - 1)[k - 1])


def conformal_quantiles(score_matrix: np.ndarray, alpha: float) -> np.ndarray:
    """Column-wise ``conformal_quantile`` of an (N, M) score matrix."""
    n = score_matrix.shape[0]
    k = quantile_rank(n, alpha)
    if k > n:
        return np.full(score_matrix.shape[1], math.inf)
    return np.partition(score_matrix, k - 1, axis=0)[k - 1]


def _warn_infinite(alpha: float, n: int) -> None:
    msg = f"alpha={alpha} is unattainable with {n} calibration points; radius is infinite"
    logger.warning(msg)
    warnings.warn(msg, UnattainableCoverageWarning, stacklevel=3)


@dataclass
class CalibrationResult:
    gamma: float
    scores: np.ndarray
    quantile_index: int


def calibrate(flow: FlowModel, K: int, X: np.ndarray, Y: np.ndarray, alpha: float, M: int, seed: int,
              stream: int = STREAM_CALIBRATION) -> CalibrationResult:
    scores = calibration_scores(flow, K, X, Y, M, seed, stream)
    gamma = conformal_quantile(scores, alpha)
    if math.isinf(gamma):
        _warn_infinite(alpha, len(scores))
    return CalibrationResult(gamma, scores, quantile_rank(len(scores), alpha))


@dataclass
class BallUnionRegion:
    centers: np.ndarray  # (K, d)
    gamma: float

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        if self.gamma < 0:
            raise ValueError("ball radius must be non-negative")

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    def contains(self, y) -> bool:
        return region_contains(self, y)

    def volume(self, grid: VolumeGrid):
        return region_volume(self, grid)

    def export(self, index: int) -> dict:
        return {
            "test_index": int(index),
            "K": self.K,
            "gamma": float(self.gamma),
            "centers": self.centers.tolist(),
        }


def region_contains(region: BallUnionRegion, y) -> bool:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != region.centers.shape[1]:
        raise ValueError("dimension mismatch between point and region")
    if math.isinf(region.gamma):
        return True
    return bool(_distances(y, region.centers).min() <= region.gamma)


def region_volume(region: BallUnionRegion, grid: VolumeGrid):
    """``(count, volume)`` of grid points inside the region."""
    if math.isinf(region.gamma):
        count = grid.n_points
    else:
        count = 0
        for start in range(0, grid.n_points, _CHUNK_ROWS):
            pts = grid.points[start:start + _CHUNK_ROWS]
            count += int((_distances(pts, region.centers).min(axis=1) <= region.gamma).sum())
    return count, count * grid.cell_volume


def region_counts_all_k(samples: np.ndarray, gammas: np.ndarray, grid: VolumeGrid) -> np.ndarray:
    """Grid counts of the top-K ball union with radius ``gammas[K-1]`` for every K."""
    M = samples.shape[0]
    counts = np.zeros(M, dtype=np.int64)
    gammas = np.asarray(gammas, dtype=np.float64)
    chunk = max(1, _CHUNK_ROWS * 8 // M)
    for start in range(0, grid.n_points, chunk):
        prof = nearest_center_profile(grid.points[start:start + chunk], samples)
        counts += (prof <= gammas[None, :]).sum(axis=0)
    return counts


@dataclass
class KSelection:
    k_star: int
    sizes: np.ndarray  # mean volume per K (index K-1)
    gammas: np.ndarray  # radius per K


def select_k(flow: FlowModel, X_val: np.ndarray, X_sel: np.ndarray, Y_sel: np.ndarray, alpha: float,
             M: int, grid: VolumeGrid, seed: int, sel_stream: int = STREAM_SELECTION,
             val_stream: int = STREAM_VALIDATION) -> KSelection:
    """Pick K in 1..M minimising mean region volume over ``X_val``.

    Radii come from ``(X_sel, Y_sel)``; ties go to the smaller K, and M is
    returned when every radius is infinite.
    """
    if len(X_val) == 0 or len(Y_sel) == 0:
        raise ValueError("validation and selection-calibration sets must be non-empty")
    score_mat = calibration_score_matrix(flow, X_sel, Y_sel, M, seed, sel_stream)
    gammas = conformal_quantiles(score_mat, alpha)
    if np.all(np.isinf(gammas)):
        _warn_infinite(alpha, len(Y_sel))
        return KSelection(M, np.full(M, grid.n_points * grid.cell_volume), gammas)
    samples, _ = sample_sorted_batch(X_val, M, flow, seed, val_stream)
    totals = np.zeros(M, dtype=np.int64)
    for s in samples:
        totals += region_counts_all_k(s, gammas, grid)
    sizes = totals * grid.cell_volume / len(samples)
    k_star, best = M, math.inf
    for k in range(1, M + 1):
        if sizes[k - 1] < best:
            k_star, best = k, sizes[k - 1]
    return KSelection(k_star, sizes, gammas)


def predict_region(x_test, flow: FlowModel, k_star: int, gamma: float, M: int, rng) -> BallUnionRegion:
    if not 1 <= k_star <= M:
        raise ValueError(f"need 1 <= K* <= M, got K*={k_star}, M={M}")
    ss = sample_sorted(x_test, M, flow, rng)
    return BallUnionRegion(ss.top(k_star).copy(), gamma)


def predict_regions(X_test: np.ndarray, flow: FlowModel, k_star: int, gamma: float, M: int, seed: int,
                    stream: int = STREAM_TEST):
    """Regions for a batch of inputs; point i uses ``point_rng(seed, stream, i)``."""
    if not 1 <= k_star <= M:
        raise ValueError(f"need 1 <= K* <= M, got K*={k_star}, M={M}")
    samples, _ = sample_sorted_batch(X_test, M, flow, seed, stream)
    return [BallUnionRegion(s[:k_star].copy(), gamma) for s in samples]

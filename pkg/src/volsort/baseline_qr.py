"""Naive multi-target baseline: one quantile net per response dimension,
conformalized jointly into an axis-aligned box."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .metrics import VolumeGrid
from .nn_core import MLP, TrainConfig, train
from .vsps import conformal_quantile

logger = logging.getLogger(__name__)


def pinball_loss(prediction, target, tau: float):
    """Mean pinball loss and its gradient w.r.t. ``prediction`` (per element, mean-scaled)."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    pred = np.asarray(prediction, dtype=np.float64)
    diff = np.asarray(target, dtype=np.float64) - pred
    loss = np.where(diff >= 0, tau * diff, (tau - 1.0) * diff)
    grad = np.where(diff >= 0, -tau, 1.0 - tau) / max(pred.size, 1)
    return float(loss.mean()), grad


def _qr_loss(alpha):
    taus = (alpha / 2, 1 - alpha / 2)

    def loss_fn(net: MLP, data: tuple, need_grad: bool):
        x, y = data
        out, caches = net.forward(x, keep_cache=True)
        lo, g_lo = pinball_loss(out[:, 0], y, taus[0])
        hi, g_hi = pinball_loss(out[:, 1], y, taus[1])
        if not need_grad:
            return lo + hi, None
        grads, _ = net.backward(caches, np.column_stack([g_lo, g_hi]))
        return lo + hi, grads

    return loss_fn


@dataclass
class QuantileNet:
    nets: List[MLP]
    alpha: float

    def params(self) -> List[np.ndarray]:
        out = []
        for n in self.nets:
            out.extend(n.params())
        return out

    def predict(self, X) -> tuple:
        """Return ``(lower, upper)`` arrays of shape (n, d), crossing repaired."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        outs = np.stack([n.forward(X) for n in self.nets], axis=1)  # (n, d, 2)
        lo = np.minimum(outs[..., 0], outs[..., 1])
        hi = np.maximum(outs[..., 0], outs[..., 1])
        return lo, hi


def train_naive_qr(train_xy, val_xy, alpha: float, config: Optional[TrainConfig] = None,
                   hidden_sizes: Sequence[int] = (64, 64, 64), seed: int = 0) -> QuantileNet:
    config = config or TrainConfig(seed=seed)
    X_tr, Y_tr = train_xy
    X_va, Y_va = val_xy
    Y_tr, Y_va = np.atleast_2d(Y_tr), np.atleast_2d(Y_va)
    rng = np.random.default_rng(seed)
    loss_fn = _qr_loss(alpha)
    nets = []
    for j in range(Y_tr.shape[1]):
        net = MLP(X_tr.shape[1], hidden_sizes, 2, rng)
        cfg = TrainConfig(config.batch_size, config.max_epochs, config.patience, config.lr, config.seed + j)
        _, hist = train(net, loss_fn, (X_tr, Y_tr[:, j]), (X_va, Y_va[:, j]), cfg)
        logger.info("quantile net %d: epochs=%d best_val=%.4f", j, len(hist), hist.best_val)
        nets.append(net)
    return QuantileNet(nets, alpha)


def box_scores(model: QuantileNet, X, Y) -> np.ndarray:
    lo, hi = model.predict(X)
    Y = np.atleast_2d(Y)
    return np.maximum(lo - Y, Y - hi).max(axis=1)


def conformalize_qr(model: QuantileNet, X_cal, Y_cal, alpha: float) -> float:
    """Joint radius: order statistic of the max-over-dimensions CQR score."""
    if len(Y_cal) == 0:
        raise ValueError("calibration set is empty")
    return conformal_quantile(box_scores(model, X_cal, Y_cal), alpha)


@dataclass
class BoxRegion:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)

    def contains(self, y) -> bool:
        return box_contains(self, y)

    def volume(self, grid: VolumeGrid):
        return box_volume(self, grid)

    def inflate(self, gamma: float) -> "BoxRegion":
        return BoxRegion(self.lower - gamma, self.upper + gamma)

    def export(self, index: int) -> dict:
        return {"test_index": int(index), "lower": self.lower.tolist(), "upper": self.upper.tolist()}


def qr_region(x, model: QuantileNet, gamma_qr: float) -> BoxRegion:
    lo, hi = model.predict(np.asarray(x, dtype=np.float64).reshape(1, -1))
    return BoxRegion(lo[0], hi[0]).inflate(gamma_qr)


def qr_regions(X, model: QuantileNet, gamma_qr: float) -> List[BoxRegion]:
    lo, hi = model.predict(X)
    return [BoxRegion(a, b).inflate(gamma_qr) for a, b in zip(lo, hi)]


def box_contains(box: BoxRegion, y) -> bool:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    return bool(np.all(box.lower <= y) and np.all(y <= box.upper))


def box_volume(box: BoxRegion, grid: VolumeGrid):
    pts = grid.points
    inside = np.all((pts >= box.lower) & (pts <= box.upper), axis=1)
    count = int(inside.sum())
    return count, count * grid.cell_volume

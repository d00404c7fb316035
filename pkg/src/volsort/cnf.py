"""Conditional masked autoregressive flow built from stacked MADE blocks.

Convention per coordinate: ``z_i = (y_i - mu_i) * exp(-s_i)`` where
``mu_i, s_i`` depend on ``x`` and on the coordinates preceding ``i`` in the
block's ordering. The forward (density) pass is one network evaluation per
block; the inverse (sampling) pass needs ``d`` evaluations per block.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .nn_core import (
    AffineLayer,
    TrainConfig,
    affine_backward,
    affine_forward,
    leaky_relu,
    leaky_relu_backward,
    train,
)

logger = logging.getLogger(__name__)

LOG_SCALE_CLAMP = 7.0
LOG_2PI = float(np.log(2 * np.pi))


class EvaluationError(FloatingPointError):
    pass


def build_made_masks(d: int, p: int, hidden_sizes: Sequence[int], ordering: Sequence[int], rng):
    """Connectivity masks for a conditional MADE.

    ``ordering[j]`` is the rank (1..d) of response coordinate ``j``. The first
    hidden layer sees ``[y, x]``; the ``x`` columns are never masked. The last
    mask maps to ``2d`` outputs laid out as ``[mu_1..mu_d, s_1..s_d]``.
    """
    if d < 1:
        raise ValueError(f"response dimension must be >= 1, got {d}")
    if not hidden_sizes:
        raise ValueError("hidden_sizes must be non-empty")
    ordering = np.asarray(ordering, dtype=int)
    if sorted(ordering.tolist()) != list(range(1, d + 1)):
        raise ValueError(f"ordering must be a permutation of 1..{d}, got {ordering.tolist()}")

    in_deg = ordering
    hidden_degs = []
    for h in hidden_sizes:
        if d == 1:
            hidden_degs.append(np.zeros(h, dtype=int))
        else:
            hidden_degs.append(rng.integers(1, d, size=h))  # uniform on 1..d-1

    masks = []
    first = (hidden_degs[0][:, None] >= in_deg[None, :]).astype(np.float64)
    masks.append(np.hstack([first, np.ones((hidden_sizes[0], p))]))
    for prev, cur in zip(hidden_degs[:-1], hidden_degs[1:]):
        masks.append((cur[:, None] >= prev[None, :]).astype(np.float64))
    out = (in_deg[:, None] > hidden_degs[-1][None, :]).astype(np.float64)
    masks.append(np.vstack([out, out]))
    return masks


class MadeBlock:
    def __init__(self, d: int, p: int, hidden_sizes: Sequence[int], ordering: Sequence[int], rng,
                 zero_init: bool = False):
        self.d, self.p = d, p
        self.hidden_sizes = list(hidden_sizes)
        self.ordering = np.asarray(ordering, dtype=int)
        masks = build_made_masks(d, p, hidden_sizes, ordering, rng)
        sizes = [d + p, *hidden_sizes, 2 * d]
        self.layers = []
        for (a, b), m in zip(zip(sizes[:-1], sizes[1:]), masks):
            layer = AffineLayer.init(a, b, rng, mask=m)
            if zero_init:
                layer.weights[...] = 0.0
            self.layers.append(layer)

    def params(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.biases])
        return out

    def heads(self, y: np.ndarray, x: np.ndarray, keep_cache: bool = False):
        """Return ``(mu, s_raw)``; s_raw is unclamped."""
        h = np.hstack([y, x])
        caches = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h, c = affine_forward(h, layer)
            caches.append(c)
            if i < last:
                h, c = leaky_relu(h)
                caches.append(c)
        mu, s_raw = h[:, :self.d], h[:, self.d:]
        return (mu, s_raw, caches) if keep_cache else (mu, s_raw)

    def heads_backward(self, caches, grad_mu, grad_s_raw):
        """Backprop head gradients; returns (param grads, grad wrt y)."""
        grads: List[np.ndarray] = []
        g = np.hstack([grad_mu, grad_s_raw])
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            if i < last:
                g = leaky_relu_backward(caches.pop(), g)
            gw, gb, g = affine_backward(caches.pop(), g)
            grads[:0] = [gw, gb]
        return grads, g[:, :self.d]

    def forward(self, y, x):
        mu, s_raw = self.heads(y, x)
        s = np.clip(s_raw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        return (y - mu) * np.exp(-s), -s.sum(axis=1)

    def inverse(self, z, x):
        y = np.zeros_like(z)
        s_final = np.zeros_like(z)
        for rank in range(1, self.d + 1):
            i = int(np.flatnonzero(self.ordering == rank)[0])
            mu, s_raw = self.heads(y, x)
            s = np.clip(s_raw[:, i], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
            y[:, i] = z[:, i] * np.exp(s) + mu[:, i]
            s_final[:, i] = s
        return y, -s_final.sum(axis=1)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise EvaluationError("non-finite value in flow evaluation")


class FlowModel:
    """Stack of conditional MADE blocks; orderings alternate identity/reversed."""

    def __init__(self, d: int, p: int, hidden_sizes: Sequence[int] = (64, 64, 64), n_blocks: int = 5,
                 seed: int = 0, zero_init: bool = False):
        if d < 1:
            raise ValueError(f"response dimension must be >= 1, got {d}")
        self.d, self.p = int(d), int(p)
        self.hidden_sizes = [int(h) for h in hidden_sizes]
        self.n_blocks = int(n_blocks)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        ident = np.arange(1, d + 1)
        self.blocks = [
            MadeBlock(d, p, self.hidden_sizes, ident if b % 2 == 0 else ident[::-1], rng, zero_init)
            for b in range(self.n_blocks)
        ]

    @property
    def orderings(self):
        return [b.ordering.tolist() for b in self.blocks]

    def params(self) -> List[np.ndarray]:
        out = []
        for b in self.blocks:
            out.extend(b.params())
        return out

    def _prep(self, a, width, name):
        a = np.asarray(a, dtype=np.float64)
        single = a.ndim == 1
        a = np.atleast_2d(a)
        if a.shape[1] != width:
            raise ValueError(f"{name} has width {a.shape[1]}, expected {width}")
        return a, single

    def forward(self, y, x):
        """Batched ``f(y, x)``; returns ``(z, log|det dz/dy|)``."""
        y, single = self._prep(y, self.d, "y")
        x, _ = self._prep(x, self.p, "x")
        x = np.broadcast_to(x, (y.shape[0], self.p))
        logdet = np.zeros(y.shape[0])
        h = y
        for block in self.blocks:
            h, ld = block.forward(h, x)
            logdet += ld
        _check_finite(h, logdet)
        return (h[0], float(logdet[0])) if single else (h, logdet)

    def inverse(self, z, x):
        """Batched ``f^{-1}(z, x)``; returns ``(y, log|det df/dy| at y)``."""
        z, single = self._prep(z, self.d, "z")
        x, _ = self._prep(x, self.p, "x")
        x = np.broadcast_to(x, (z.shape[0], self.p))
        logdet = np.zeros(z.shape[0])
        h = z
        for block in reversed(self.blocks):
            h, ld = block.inverse(h, x)
            logdet += ld
        _check_finite(h, logdet)
        return (h[0], float(logdet[0])) if single else (h, logdet)

    def log_prob(self, y, x):
        z, logdet = self.forward(y, x)
        z = np.atleast_2d(z)
        return -0.5 * (z**2).sum(axis=1) - 0.5 * self.d * LOG_2PI + logdet

    def metadata(self) -> dict:
        return {
            "format": "volsort-flow/1",
            "d": self.d,
            "p": self.p,
            "hidden_sizes": self.hidden_sizes,
            "n_blocks": self.n_blocks,
            "orderings": self.orderings,
            "seed": self.seed,
        }


def flow_forward(y, x, model: FlowModel):
    return model.forward(y, x)


def flow_inverse(z, x, model: FlowModel):
    return model.inverse(z, x)


def nll_loss(batch_y, batch_x, model: FlowModel, need_grad: bool = True):
    """Mean negative log-likelihood under a N(0, I) base and its exact gradients."""
    y = np.atleast_2d(np.asarray(batch_y, dtype=np.float64))
    x = np.atleast_2d(np.asarray(batch_x, dtype=np.float64))
    n = y.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    h = y
    tape = []
    logdet = np.zeros(n)
    for block in model.blocks:
        mu, s_raw, caches = block.heads(h, x, keep_cache=True)
        s = np.clip(s_raw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        e = np.exp(-s)
        z = (h - mu) * e
        tape.append((block, caches, s_raw, e, z))
        logdet -= s.sum(axis=1)
        h = z
    loss = float(np.mean(0.5 * (h**2).sum(axis=1) - logdet) + 0.5 * model.d * LOG_2PI)
    if not np.isfinite(loss):
        raise EvaluationError("non-finite NLL")
    if not need_grad:
        return loss, None

    grads: List[np.ndarray] = []
    g_z = h / n
    for block, caches, s_raw, e, z in reversed(tape):
        g_mu = -g_z * e
        g_s = -g_z * z + 1.0 / n
        inside = (s_raw >= -LOG_SCALE_CLAMP) & (s_raw <= LOG_SCALE_CLAMP)
        g_s = g_s * inside
        block_grads, g_in = block.heads_backward(caches, g_mu, g_s)
        grads[:0] = block_grads
        g_z = g_z * e + g_in
    return loss, grads


def flow_loss_fn(model: FlowModel, data: tuple, need_grad: bool):
    y, x = data
    return nll_loss(y, x, model, need_grad)


def fit_flow(train_xy, val_xy, hidden_sizes=(64, 64, 64), n_blocks: int = 5,
             config: Optional[TrainConfig] = None, seed: int = 0):
    """Train a flow on ``(X, Y)`` pairs and return ``(model, history)``.

    ``seed`` fixes the architecture (weights and mask degrees); shuffling
    uses ``config.seed``.
    """
    config = config or TrainConfig(seed=seed)
    X_tr, Y_tr = train_xy
    X_va, Y_va = val_xy
    model = FlowModel(Y_tr.shape[1], X_tr.shape[1], hidden_sizes, n_blocks, seed=seed)
    logger.info("training flow: d=%d p=%d blocks=%d hidden=%s n_train=%d",
                model.d, model.p, n_blocks, list(hidden_sizes), len(Y_tr))
    _, history = train(model, flow_loss_fn, (Y_tr, X_tr), (Y_va, X_va), config)
    logger.info("flow training done: epochs=%d best_epoch=%d best_val_nll=%.4f",
                len(history), history.best_epoch, history.best_val)
    return model, history


def save_flow(model: FlowModel, path) -> None:
    arrays = {f"param_{i:04d}": np.ascontiguousarray(p, dtype="<f8") for i, p in enumerate(model.params())}
    with open(path, "wb") as fh:
        np.savez(fh, metadata=np.array(json.dumps(model.metadata())), **arrays)


def load_flow(path) -> FlowModel:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["metadata"]))
        if meta.get("format") != "volsort-flow/1":
            raise ValueError(f"{path}: not a flow model file")
        model = FlowModel(meta["d"], meta["p"], meta["hidden_sizes"], meta["n_blocks"], seed=meta["seed"])
        params = model.params()
        for i, p in enumerate(params):
            p[...] = data[f"param_{i:04d}"]
    return model

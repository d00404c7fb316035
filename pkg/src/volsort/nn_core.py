"""Small numpy neural-network engine: masked affine layers, leaky ReLU,
Adam and an early-stopping mini-batch training loop.

Everything is float64 and uses hand-written backward passes.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Raised when a loss or gradient goes non-finite during training."""

    def __init__(self, message: str, epoch: Optional[int] = None, group: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch
        self.group = group


@dataclass
class AffineLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    mask: Optional[np.ndarray] = None  # (out, in), None means all ones

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def effective_weights(self) -> np.ndarray:
        if self.mask is None:
            return self.weights
        return self.weights * self.mask

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, mask=None) -> "AffineLayer":
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_out, n_in))
        if mask is not None:
            mask = np.asarray(mask, dtype=np.float64)
            if mask.shape != w.shape:
                raise ShapeError(f"mask shape {mask.shape} != weight shape {w.shape}")
        return cls(w, np.zeros(n_out), mask)


def affine_forward(inputs: np.ndarray, layer: AffineLayer):
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != layer.n_in:
        raise ShapeError(f"expected input of width {layer.n_in}, got shape {inputs.shape}")
    w = layer.effective_weights()
    out = inputs @ w.T + layer.biases
    return out, (inputs, layer)


def affine_backward(cache, grad_output: np.ndarray):
    inputs, layer = cache
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.shape != (inputs.shape[0], layer.n_out):
        raise ShapeError(
            f"grad_output shape {grad_output.shape} does not match forward output "
            f"{(inputs.shape[0], layer.n_out)}"
        )
    grad_w = grad_output.T @ inputs
    if layer.mask is not None:
        grad_w = grad_w * layer.mask
    grad_b = grad_output.sum(axis=0)
    grad_in = grad_output @ layer.effective_weights()
    return grad_w, grad_b, grad_in


def leaky_relu(inputs: np.ndarray, slope: float = LEAKY_SLOPE):
    inputs = np.asarray(inputs, dtype=np.float64)
    return np.where(inputs > 0, inputs, slope * inputs), (inputs, slope)


def leaky_relu_backward(cache, grad_output: np.ndarray) -> np.ndarray:
    inputs, slope = cache
    # subgradient at exactly 0 is the slope
    return grad_output * np.where(inputs > 0, 1.0, slope)


class MLP:
    """Fully connected net with leaky-ReLU hidden layers and a linear head."""

    def __init__(self, n_in: int, hidden_sizes: Sequence[int], n_out: int, rng: np.random.Generator):
        sizes = [n_in, *hidden_sizes, n_out]
        self.layers = [AffineLayer.init(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def params(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.biases])
        return out

    def forward(self, inputs: np.ndarray, keep_cache: bool = False):
        h = np.asarray(inputs, dtype=np.float64)
        caches = []
        for i, layer in enumerate(self.layers):
            h, c = affine_forward(h, layer)
            caches.append(c)
            if i < len(self.layers) - 1:
                h, c = leaky_relu(h)
                caches.append(c)
        return (h, caches) if keep_cache else h

    def backward(self, caches, grad_output: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        """Return (parameter grads aligned with params(), input grad)."""
        grads: List[np.ndarray] = []
        g = grad_output
        for i in range(len(self.layers) - 1, -1, -1):
            if i < len(self.layers) - 1:
                g = leaky_relu_backward(caches.pop(), g)
            gw, gb, g = affine_backward(caches.pop(), g)
            grads[:0] = [gw, gb]
        return grads, g


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Sequence[np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and optimizer state have different lengths")
    for i, (p, g, m) in enumerate(zip(params, grads, state.m)):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"parameter group {i}: shape mismatch {p.shape} / {g.shape} / {m.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter group {i}", group=i)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 1000
    patience: int = 20
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be positive")
        if self.max_epochs and self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


@dataclass
class History:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    best_epoch: int = 0  # 0 means the initial parameters were never beaten
    best_val: float = float("inf")

    def __len__(self):
        return len(self.val_loss)


# loss_fn(model, data, need_grad) -> (loss, grads or None); data is a tuple of
# arrays sharing the leading (row) dimension.
LossFn = Callable[[object, tuple, bool], Tuple[float, Optional[List[np.ndarray]]]]


def _rows(data: tuple) -> int:
    return len(data[0]) if len(data) else 0


def _take(data: tuple, idx: np.ndarray) -> tuple:
    return tuple(a[idx] for a in data)


def train(model, loss_fn: LossFn, train_data: tuple, val_data: tuple, config: TrainConfig):
    """Mini-batch Adam with early stopping on validation loss.

    ``model`` must expose ``params()`` returning the live parameter arrays.
    Returns ``(best_params, history)``; the model is left holding
    ``best_params``. The untrained parameters count as the epoch-0 baseline,
    so a run whose validation loss never improves returns them unchanged.
    """
    n = _rows(train_data)
    if n == 0 or _rows(val_data) == 0:
        raise ValueError("train and validation sets must be non-empty")
    params = model.params()
    history = History()
    best = [p.copy() for p in params]
    if config.max_epochs == 0:
        return best, history

    rng = np.random.default_rng(config.seed)
    state = AdamState.fresh(params, lr=config.lr)
    best_val, _ = loss_fn(model, val_data, False)
    best_val = float(best_val)
    history.best_val = best_val
    wait = 0
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, grads = loss_fn(model, _take(train_data, idx), True)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            try:
                adam_step(params, grads, state)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}", epoch=epoch, group=exc.group) from exc
            total += float(loss) * len(idx)
        val, _ = loss_fn(model, val_data, False)
        val = float(val)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        history.train_loss.append(total / n)
        history.val_loss.append(val)
        if val < best_val:
            best_val = val
            best = [p.copy() for p in params]
            history.best_epoch = epoch
            history.best_val = val
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                logger.debug("early stop at epoch %d (best %d)", epoch, history.best_epoch)
                break
    for p, b in zip(params, best):
        p[...] = b
    return best, history


def gradient_check(model, loss_fn: LossFn, probe_batch: tuple, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    params = model.params()
    if not params:
        return 0.0
    _, analytic = loss_fn(model, probe_batch, True)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            lp, _ = loss_fn(model, probe_batch, False)
            flat[k] = orig - step
            lm, _ = loss_fn(model, probe_batch, False)
            flat[k] = orig
            num = (lp - lm) / (2 * step)
            a = gflat[k]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return float(worst)


def clone_params(model) -> List[np.ndarray]:
    return [p.copy() for p in model.params()]


def load_params(model, values: Sequence[np.ndarray]) -> None:
    for p, v in zip(model.params(), values):
        p[...] = v


def frozen_copy(model):
    return copy.deepcopy(model)

"""Quick invariant and oracle checks runnable from the CLI (``volsort check``)."""

from __future__ import annotations

import math

import numpy as np

from .baseline_qr import _qr_loss
from .cnf import FlowModel, flow_loss_fn
from .metrics import VolumeGrid
from .nn_core import MLP, gradient_check
from .vsps import BallUnionRegion, conformal_quantile


def fd_jacobian(model: FlowModel, y: np.ndarray, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``z = f(y, x)`` with respect to ``y``."""
    d = model.d
    J = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        zp, _ = model.forward(y + e, x)
        zm, _ = model.forward(y - e, x)
        J[:, j] = (zp - zm) / (2 * h)
    return J


def flow_diagnostics(model: FlowModel, n_probes: int = 200, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((n_probes, model.d))
    x = rng.standard_normal((n_probes, model.p))
    z, ld = model.forward(y, x)
    y_back, ld_back = model.inverse(z, x)
    z2 = rng.standard_normal((n_probes, model.d))
    z_back, _ = model.forward(model.inverse(z2, x)[0], x)
    det_err = 0.0
    for i in range(min(n_probes, 20)):
        fd = abs(np.linalg.det(fd_jacobian(model, y[i], x[i])))
        det_err = max(det_err, abs(math.exp(ld[i]) - fd) / max(fd, 1e-300))
    return {
        "roundtrip_y_max_abs": float(np.abs(y_back - y).max()),
        "roundtrip_z_max_abs": float(np.abs(z_back - z2).max()),
        "logdet_inverse_vs_forward_max_abs": float(np.abs(ld_back - ld).max()),
        "logdet_vs_fd_det_max_rel": det_err,
        "n_probes": n_probes,
    }


def made_violations(model: FlowModel, seed: int = 0, n_probes: int = 3) -> int:
    """Count head entries that move when a non-ancestor input is perturbed."""
    rng = np.random.default_rng(seed)
    bad = 0
    for block in model.blocks:
        for _ in range(n_probes):
            y = rng.standard_normal((1, model.d))
            x = rng.standard_normal((1, model.p))
            mu0, s0 = block.heads(y, x)
            for j in range(model.d):
                yp = y.copy()
                yp[0, j] += 1.0
                mu1, s1 = block.heads(yp, x)
                for i in range(model.d):
                    if block.ordering[j] >= block.ordering[i]:
                        if mu1[0, i] != mu0[0, i] or s1[0, i] != s0[0, i]:
                            bad += 1
    return bad


def run_all():
    results = []
    flow = FlowModel(2, 1, [8, 8], 1, seed=1)
    diag = flow_diagnostics(FlowModel(3, 2, [16, 16], 3, seed=2), n_probes=1000)
    results.append(("flow round trip", diag["roundtrip_y_max_abs"] <= 1e-6,
                    f"max |y - f^-1(f(y))| = {diag['roundtrip_y_max_abs']:.2e}"))
    results.append(("log-det vs finite differences", diag["logdet_vs_fd_det_max_rel"] <= 1e-4,
                    f"max rel err = {diag['logdet_vs_fd_det_max_rel']:.2e}"))
    viol = sum(made_violations(FlowModel(d, 2, [16, 16], 2, seed=d)) for d in (1, 2, 3, 4))
    results.append(("MADE autoregressive masks", viol == 0, f"{viol} violations"))

    rng = np.random.default_rng(0)
    probe = (rng.standard_normal((4, 2)), rng.standard_normal((4, 1)))
    err = gradient_check(flow, flow_loss_fn, probe)
    results.append(("flow gradient check", err <= 1e-4, f"max rel err = {err:.2e}"))
    net = MLP(1, [6, 6], 2, np.random.default_rng(3))
    qprobe = (rng.standard_normal((5, 1)), rng.standard_normal(5))
    err = gradient_check(net, _qr_loss(0.1), qprobe)
    results.append(("quantile net gradient check", err <= 1e-4, f"max rel err = {err:.2e}"))

    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        alpha = float(rng.choice([0.05, 0.1, 0.2]))
        scores = rng.standard_normal(n)
        got = conformal_quantile(scores, alpha)
        s = np.sort(scores)
        want = math.inf
        for i, v in enumerate(s, start=1):
            if i / (n + 1) >= 1 - alpha - 1e-12:
                want = v
                break
        mismatches += got != want
    results.append(("conformal quantile oracle", mismatches == 0, f"{mismatches} mismatches / 1000"))

    grid = VolumeGrid.from_step([-2, -2], [2, 2], 0.01)
    count, vol = BallUnionRegion(np.zeros((1, 2)), 1.0).volume(grid)
    results.append(("unit disk grid area", abs(vol - math.pi) / math.pi <= 0.05, f"area = {vol:.4f}"))
    return results

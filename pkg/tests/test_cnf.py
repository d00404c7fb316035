import math

import numpy as np
import pytest

from volsort.cnf import (
    LOG_2PI,
    FlowModel,
    build_made_masks,
    fit_flow,
    flow_forward,
    flow_inverse,
    flow_loss_fn,
    load_flow,
    nll_loss,
    save_flow,
)
from volsort.nn_core import TrainConfig, gradient_check


def fd_jacobian(model, y, x, h=1e-6):
    d = len(y)
    J = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[:, j] = (flow_forward(y + e, x, model)[0] - flow_forward(y - e, x, model)[0]) / (2 * h)
    return J


def halving_flow():
    """d=1, one block, mu = 0 and s = log 2 everywhere: z = y / 2."""
    model = FlowModel(1, 1, [4], 1, seed=0, zero_init=True)
    model.blocks[0].layers[-1].biases[1] = math.log(2.0)
    return model


def connectivity(masks, d):
    """Boolean path matrix from the y inputs to the 2d outputs through all masks."""
    path = masks[0][:, :d]
    for m in masks[1:]:
        path = m @ path
    return path > 0


def test_masks_reject_bad_dimension():
    with pytest.raises(ValueError):
        build_made_masks(0, 1, [4], [], np.random.default_rng(0))


def test_masks_d1_heads_depend_on_x_only():
    masks = build_made_masks(1, 2, [5, 5], [1], np.random.default_rng(0))
    assert not connectivity(masks, 1).any()
    assert np.all(masks[0][:, 1:] == 1)

    model = FlowModel(1, 2, [5, 5], 2, seed=3)
    x = np.array([0.3, -0.4])
    lds = [flow_forward(np.array([y]), x, model)[1] for y in (-2.0, 0.0, 1.7)]
    assert max(lds) - min(lds) < 1e-12


def test_masks_d2_identity_ordering():
    masks = build_made_masks(2, 1, [16, 16], [1, 2], np.random.default_rng(1))
    conn = connectivity(masks, 2)
    for row in (0, 2):  # mu_1, s_1
        assert not conn[row].any()
    for row in (1, 3):  # mu_2, s_2
        assert not conn[row, 1]


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_autoregressive_perturbation_scan(d):
    model = FlowModel(d, 2, [16, 16], 2, seed=d)
    rng = np.random.default_rng(d)
    for block in model.blocks:
        for _ in range(3):
            y = rng.normal(size=(1, d))
            x = rng.normal(size=(1, 2))
            mu0, s0 = block.heads(y, x)
            for j in range(d):
                yp = y.copy()
                yp[0, j] += 0.5
                mu1, s1 = block.heads(yp, x)
                for i in range(d):
                    if block.ordering[j] >= block.ordering[i]:
                        assert mu1[0, i] == mu0[0, i] and s1[0, i] == s0[0, i]


def test_orderings_alternate():
    model = FlowModel(3, 1, [8], 3, seed=0)
    assert model.orderings == [[1, 2, 3], [3, 2, 1], [1, 2, 3]]


def test_zero_init_is_identity():
    model = FlowModel(3, 2, [8, 8], 4, seed=0, zero_init=True)
    rng = np.random.default_rng(0)
    y, x = rng.normal(size=3), rng.normal(size=2)
    z, ld = flow_forward(y, x, model)
    np.testing.assert_array_equal(z, y)
    assert ld == 0.0
    y2, ld2 = flow_inverse(y, x, model)
    np.testing.assert_array_equal(y2, y)
    assert ld2 == 0.0


def test_single_affine_coordinate_closed_form():
    z, ld = flow_forward(np.array([3.0]), np.array([0.7]), halving_flow())
    assert z[0] == pytest.approx(1.5)
    assert ld == pytest.approx(-math.log(2.0))


@pytest.mark.parametrize("d", [1, 2, 3])
def test_logdet_matches_finite_difference_jacobian(d):
    model = FlowModel(d, 2, [16, 16], 3, seed=10 + d)
    rng = np.random.default_rng(d)
    for _ in range(20):
        y, x = rng.normal(size=d), rng.normal(size=2)
        _, ld = flow_forward(y, x, model)
        fd = abs(np.linalg.det(fd_jacobian(model, y, x)))
        assert abs(math.exp(ld) - fd) / fd <= 1e-4


def test_round_trip_both_directions():
    model = FlowModel(3, 2, [16, 16], 5, seed=4)
    rng = np.random.default_rng(4)
    y, x = rng.normal(size=(1000, 3)) * 2, rng.normal(size=(1000, 2))
    z, ld = model.forward(y, x)
    y_back, _ = model.inverse(z, x)
    assert np.abs(y_back - y).max() <= 1e-6
    z0 = rng.normal(size=(1000, 3))
    y0, ld_inv = model.inverse(z0, x)
    z_back, ld_fwd = model.forward(y0, x)
    assert np.abs(z_back - z0).max() <= 1e-6
    assert np.abs(ld_inv - ld_fwd).max() <= 1e-9


def test_inverse_logdet_equals_forward_at_recovered_point():
    model = FlowModel(2, 1, [8, 8], 3, seed=5)
    rng = np.random.default_rng(5)
    for _ in range(20):
        z, x = rng.normal(size=2), rng.normal(size=1)
        y, ld_inv = flow_inverse(z, x, model)
        _, ld_fwd = flow_forward(y, x, model)
        assert abs(ld_inv - ld_fwd) <= 1e-9


def test_transform_commutes_with_batch_permutation():
    model = FlowModel(2, 1, [16, 16], 3, seed=6)
    rng = np.random.default_rng(6)
    y, x = rng.normal(size=(64, 2)), rng.normal(size=(64, 1))
    perm = rng.permutation(64)
    z, ld = model.forward(y, x)
    zp, ldp = model.forward(y[perm], x[perm])
    np.testing.assert_array_equal(zp, z[perm])
    np.testing.assert_array_equal(ldp, ld[perm])


def test_nll_zero_init_standard_normal():
    d = 2
    model = FlowModel(d, 1, [8], 2, seed=0, zero_init=True)
    rng = np.random.default_rng(7)
    n = 20000
    y = rng.normal(size=(n, d))
    loss, _ = nll_loss(y, rng.normal(size=(n, 1)), model, need_grad=False)
    expected = d / 2 * (1 + LOG_2PI)
    se = math.sqrt(d / 2) / math.sqrt(n)  # sd of 0.5 * chi2_d is sqrt(d/2)
    assert abs(loss - expected) <= 4 * se


def test_nll_halving_flow_at_origin():
    loss, _ = nll_loss(np.array([[0.0]]), np.array([[0.2]]), halving_flow(), need_grad=False)
    assert loss == pytest.approx(0.5 * LOG_2PI + math.log(2.0), abs=1e-12)


def test_nll_gradient_check():
    model = FlowModel(2, 1, [8, 8], 2, seed=8)
    rng = np.random.default_rng(8)
    err = gradient_check(model, flow_loss_fn, (rng.normal(size=(5, 2)), rng.normal(size=(5, 1))))
    assert err <= 1e-4


def test_nll_rejects_empty_batch():
    with pytest.raises(ValueError):
        nll_loss(np.zeros((0, 2)), np.zeros((0, 1)), FlowModel(2, 1, [4], 1))


def test_fit_standard_normal_reaches_analytic_nll():
    rng = np.random.default_rng(9)
    d, n = 2, 3000
    x = rng.normal(size=(n, 1))
    y = rng.normal(size=(n, d))
    model, hist = fit_flow((x[:2000], y[:2000]), (x[2000:], y[2000:]), [16, 16], 2,
                           TrainConfig(max_epochs=200, patience=20, seed=1), seed=1)
    val, _ = nll_loss(y[2000:], x[2000:], model, need_grad=False)
    assert abs(val - d / 2 * (1 + LOG_2PI)) <= 0.1


def test_fit_is_deterministic():
    rng = np.random.default_rng(10)
    x, y = rng.normal(size=(300, 1)), rng.normal(size=(300, 2))
    cfg = TrainConfig(batch_size=64, max_epochs=3, patience=3, seed=2)
    m1, _ = fit_flow((x[:200], y[:200]), (x[200:], y[200:]), [8], 2, cfg, seed=3)
    m2, _ = fit_flow((x[:200], y[:200]), (x[200:], y[200:]), [8], 2, cfg, seed=3)
    for a, b in zip(m1.params(), m2.params()):
        np.testing.assert_array_equal(a, b)


def test_trained_1d_density_integrates_to_one():
    rng = np.random.default_rng(11)
    n = 2000
    x = rng.choice([-1.0, 1.0], size=(n, 1))
    y = x + 0.5 * rng.normal(size=(n, 1)) ** 3
    model, _ = fit_flow((x[:1500], y[:1500]), (x[1500:], y[1500:]), [16, 16], 3,
                        TrainConfig(max_epochs=60, patience=10, seed=0), seed=0)
    grid = np.linspace(-40, 40, 80001)[:, None]
    for xv in (-1.0, 1.0):
        dens = np.exp(model.log_prob(grid, np.array([xv])))
        assert abs(np.trapezoid(dens, grid[:, 0]) - 1.0) <= 0.01


def test_serialization_round_trip(tmp_path):
    model = FlowModel(2, 3, [8, 8], 3, seed=12)
    path = tmp_path / "flow.npz"
    save_flow(model, path)
    loaded = load_flow(path)
    assert loaded.metadata() == model.metadata()
    rng = np.random.default_rng(12)
    y, x = rng.normal(size=(50, 2)), rng.normal(size=(50, 3))
    for a, b in zip(model.forward(y, x), loaded.forward(y, x)):
        np.testing.assert_array_equal(a, b)
    with np.load(path) as raw:
        assert raw["param_0000"].dtype == np.dtype("<f8")

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from campusflow import models as m
from campusflow import numcore as nc
from campusflow.graph import normalize_adjacency

GOLDEN = Path(__file__).parent / "data" / "gcn6_golden.json"


def _fixture():
    """The 6-node instance the golden output was frozen from."""
    rng = np.random.default_rng(2024)
    a = np.triu(rng.uniform(0, 1, (6, 6)) * (rng.random((6, 6)) < 0.6), 1)
    adj = normalize_adjacency(a + a.T)
    params = m.init_params("gcn", m.GcnConfig(input_dim=4, hidden_dim=8, seed=3))
    for k in ("b0", "b1", "b2"):
        params[k].value[:] = rng.uniform(-0.1, 0.1, params[k].shape)
    x_num = rng.uniform(-1, 1, (6, 4))
    tod = rng.integers(0, 96, 6)
    dow = rng.integers(0, 7, 6)
    return adj, params, x_num, tod, dow, rng


def _values(params):
    return {k: p.value for k, p in params.items()}


def test_gcn_golden_output():
    adj, params, x_num, tod, dow, _ = _fixture()
    out = m.gcn_forward(adj, m.joined_input(params, x_num, tod, dow), params).value.ravel()
    assert np.allclose(out, json.loads(GOLDEN.read_text())["output"], rtol=0, atol=1e-12)


def test_gcn_matches_numpy_oracle():
    adj, params, x_num, tod, dow, _ = _fixture()
    xj = m.joined_input(params, x_num, tod, dow).value
    p = _values(params)
    ref = oracles.gcn_forward(adj, xj, p["W0"], p["b0"], p["W1"], p["b1"], p["W2"], p["b2"])
    assert np.allclose(m.gcn_forward(adj, xj, params).value, ref, rtol=0, atol=1e-13)


def _max_rel_error(build, params, target):
    def loss_value():
        return float(nc.mse(build(), target).value[0, 0])

    for p in params.values():
        p.zero_grad()
    nc.backward(nc.mse(build(), target))
    worst = 0.0
    for p in params.values():
        num = nc.numerical_grad(loss_value, p, 1e-5)
        rel = nc.relative_error(p.grad, num)
        # entries where both sides are at rounding level carry no signal
        rel[np.maximum(np.abs(p.grad), np.abs(num)) < 1e-9] = 0.0
        worst = max(worst, float(rel.max()))
    return worst


def test_gcn_full_model_gradcheck():
    adj, params, x_num, tod, dow, rng = _fixture()
    target = rng.standard_normal((6, 1))
    err = _max_rel_error(lambda: m.gcn_forward(adj, m.joined_input(params, x_num, tod, dow), params), params, target)
    assert err < 1e-4


def test_mlp_gradcheck():
    rng = np.random.default_rng(8)
    params = m.init_params("mlp", m.GcnConfig(input_dim=4, hidden_dim=8, seed=5))
    params["b0"].value[:] = 0.05
    x_num = rng.uniform(-1, 1, (10, 4))
    tod, dow = rng.integers(0, 96, 10), rng.integers(0, 7, 10)
    target = rng.standard_normal((10, 1))
    assert _max_rel_error(lambda: m.mlp_forward(m.joined_input(params, x_num, tod, dow), params), params, target) < 1e-4


def test_identity_operator_reduces_to_mlp():
    adj, params, x_num, tod, dow, _ = _fixture()
    params["W1"].value[:] = np.eye(8)
    params["b1"].value[:] = 0.0
    mlp = {k: params[k] for k in m.MLP_PARAMS}
    xj = m.joined_input(params, x_num, tod, dow)
    assert np.allclose(m.gcn_forward(np.eye(6), xj, params).value, m.mlp_forward(xj, mlp).value, rtol=0, atol=1e-14)


def test_zero_weights_give_bias():
    adj, params, x_num, tod, dow, _ = _fixture()
    for k in ("W0", "W1", "W2"):
        params[k].value[:] = 0.0
    params["b2"].value[:] = 0.37
    xj = m.joined_input(params, x_num, tod, dow)
    assert np.all(m.gcn_forward(adj, xj, params).value == 0.37)
    mlp = {k: params[k] for k in m.MLP_PARAMS}
    assert np.all(m.mlp_forward(xj, mlp).value == 0.37)


def test_shape_errors():
    adj, params, x_num, tod, dow, _ = _fixture()
    xj = m.joined_input(params, x_num, tod, dow)
    with pytest.raises(ValueError):
        m.gcn_forward(np.eye(5), xj, params)
    with pytest.raises(ValueError):
        m.mlp_forward(np.ones((6, 3)), params)
    with pytest.raises(ValueError):
        m.forward("lstm", params, xj)
    with pytest.raises(ValueError):
        m.init_params("lr", m.GcnConfig(input_dim=4))
    with pytest.raises(ValueError):
        m.GcnConfig(input_dim=0)


@given(seed=st.integers(0, 2**32 - 1))
def test_permutation_equivariance(seed):
    adj, params, x_num, tod, dow, _ = _fixture()
    perm = np.random.default_rng(seed).permutation(6)
    xj = m.joined_input(params, x_num, tod, dow).value
    out = m.gcn_forward(adj, xj, params).value
    permuted = m.gcn_forward(adj[np.ix_(perm, perm)], xj[perm], params).value
    assert np.allclose(permuted, out[perm], rtol=0, atol=1e-12)


def test_stacked_graphs_match_one_at_a_time():
    adj, params, _, _, _, rng = _fixture()
    xs = [rng.uniform(-1, 1, (6, params["W0"].shape[0])) for _ in range(3)]
    # node-major stacking: row v * n_graphs + g
    stacked = np.stack(xs, axis=1).reshape(18, -1)
    out = m.gcn_forward(adj, stacked, params, n_graphs=3).value.reshape(6, 3)
    for g, x in enumerate(xs):
        assert np.allclose(out[:, g], m.gcn_forward(adj, x, params).value[:, 0], rtol=0, atol=1e-13)


def test_init_is_deterministic_per_seed():
    cfg = m.GcnConfig(input_dim=5, hidden_dim=6, seed=9)
    a, b = m.init_params("gcn", cfg), m.init_params("gcn", cfg)
    other = m.init_params("gcn", m.GcnConfig(input_dim=5, hidden_dim=6, seed=10))
    assert list(a) == list(m.GCN_PARAMS)
    for k in a:
        assert np.array_equal(a[k].value, b[k].value)
    assert not np.array_equal(a["W0"].value, other["W0"].value)
    limit = np.sqrt(6.0 / (cfg.joined_dim + 6))
    assert np.abs(a["W0"].value).max() <= limit and not a["b0"].value.any()


def test_lr_exact_recovery_and_constant_target():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((50, 4))
    w = np.array([0.5, -2.0, 1.5, 3.0])
    y = x @ w + 0.25
    weights, bias = m.lr_fit(x, y)
    assert np.sqrt(np.mean((m.lr_predict(x, weights, bias) - y) ** 2)) < 1e-8
    weights, bias = m.lr_fit(x, np.full(50, 4.2))
    assert np.abs(weights).max() < 1e-8 and bias == pytest.approx(4.2, abs=1e-8)
    with pytest.raises(ValueError):
        m.lr_fit(np.zeros((0, 3)), np.zeros(0))


@given(seed=st.integers(0, 2**32 - 1))
def test_lr_matches_normal_equation_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((40, 5))
    y = rng.standard_normal(40)
    weights, bias = m.lr_fit(x, y)
    ref_w, ref_b = oracles.ridge_normal_equations(x, y, m.LR_RIDGE)
    assert np.allclose(weights, ref_w, rtol=0, atol=1e-8) and abs(bias - ref_b) < 1e-8


def test_lr_design_reference_codes_discrete_columns():
    x = np.ones((3, 2))
    design = m.lr_design(x, np.array([0, 1, 95]), np.array([6, 0, 3]), 96)
    assert design.shape == (3, 2 + 95 + 6)
    assert design[0, 2:].sum() == 1.0  # tod 0 is the reference level, dow 6 is not
    assert design[1, 2] == 1.0 and design[2, 2 + 94] == 1.0

import copy

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from stylerl import numcore as nc


def fd_check(spec, params, x, labels, seed=0, h=1e-4):
    """Max relative error between backward() and central differences of sum(out * g)."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((x.shape[0], spec.output_dim))
    grads = nc.backward(spec, params, x, g, labels)

    def f():
        return float((nc.mlp_forward(spec, params, x, labels) * g).sum())

    worst = 0.0
    for name in params.names():
        arr = params.entries[name]
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(flat.size, 12), replace=False)
        for k in picks:
            old = flat[k]
            flat[k] = old + h
            up = f()
            flat[k] = old - h
            down = f()
            flat[k] = old
            num = (up - down) / (2 * h)
            ana = grads[name].reshape(-1)[k]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


def expectile_bisection(y, kappa, tol=1e-12):
    """Root of sum_i w_i (y_i - v) with w_i = kappa above v, 1-kappa below."""
    lo, hi = float(np.min(y)), float(np.max(y))
    while hi - lo > tol:
        v = 0.5 * (lo + hi)
        w = np.where(y >= v, kappa, 1 - kappa)
        if (w * (y - v)).sum() > 0:
            lo = v
        else:
            hi = v
    return 0.5 * (lo + hi)


@pytest.mark.parametrize("u,kappa,expected", [(2.0, 0.5, 2.0), (1.0, 0.7, 0.7), (-1.0, 0.7, 0.3)])
def test_expectile_loss_values(u, kappa, expected):
    assert nc.expectile_loss(u, kappa) == pytest.approx(expected)


@pytest.mark.parametrize("kappa", [0.3, 1.0, 1.2])
def test_expectile_loss_rejects_kappa(kappa):
    with pytest.raises(ValueError):
        nc.expectile_loss(1.0, kappa)


@given(st.floats(-1e3, 1e3))
def test_expectile_symmetric_reduction(u):
    assert nc.expectile_loss(u, 0.5) == pytest.approx(0.5 * u * u)


@given(st.floats(-50, 50, allow_subnormal=False), st.floats(0.5, 0.99))
def test_expectile_grad_matches_difference(u, kappa):
    h = 1e-6
    if abs(u) < 2 * h:
        return
    num = (nc.expectile_loss(u + h, kappa) - nc.expectile_loss(u - h, kappa)) / (2 * h)
    assert float(nc.expectile_grad(np.array(u), kappa)) == pytest.approx(num, rel=1e-5, abs=1e-6)


@pytest.mark.parametrize("kappa", [0.5, 0.7, 0.9])
def test_expectile_descent_matches_bisection(kappa):
    rng = np.random.default_rng(3)
    y = rng.standard_normal(400) * 2.0 + 1.0
    target = expectile_bisection(y, kappa)
    v = 0.0
    for _ in range(5000):
        v += 0.5 * nc.expectile_grad(y - v, kappa).mean()
    assert abs(v - target) < 1e-3


def test_zero_weights_give_bias():
    spec = nc.MlpSpec(3, (4,), 2)
    p = nc.init_params(spec, np.random.default_rng(0))
    for name in p.names():
        p.entries[name][...] = 0.0
    p.entries["out.b"][...] = [1.5, -2.0]
    out = nc.mlp_forward(spec, p, np.random.default_rng(1).standard_normal((5, 3)).astype(np.float32))
    np.testing.assert_array_equal(out, np.tile([1.5, -2.0], (5, 1)))


def test_identity_layer():
    spec = nc.MlpSpec(3, (3,), 3)
    p = nc.init_params(spec, np.random.default_rng(0), dtype=np.float64)
    p.entries["l0.w"][...] = np.eye(3)
    p.entries["out.w"][...] = np.eye(3)
    x = np.abs(np.random.default_rng(2).standard_normal((4, 3)))  # relu passes positives
    np.testing.assert_allclose(nc.mlp_forward(spec, p, x), x)


def test_linear_layer_weight_gradient():
    spec = nc.MlpSpec(3, (3,), 2)
    p = nc.init_params(spec, np.random.default_rng(0), dtype=np.float64)
    p.entries["l0.w"][...] = np.eye(3)
    x = np.array([[1.0, 2.0, 3.0]])
    g = np.array([[0.5, -1.0]])
    grads = nc.backward(spec, p, x, g)
    np.testing.assert_allclose(grads["out.w"], x.T @ g)


def test_zero_output_grad_gives_zero_gradients():
    spec = nc.MlpSpec(4, (8, 8), 2, use_layer_norm=True, label_embedding_dim=3, num_labels=5)
    p = nc.init_params(spec, np.random.default_rng(0), dtype=np.float64)
    x = np.random.default_rng(1).standard_normal((6, 4))
    grads = nc.backward(spec, p, x, np.zeros((6, 2)), np.arange(6) % 5)
    assert all(not np.any(g) for g in grads.values())


@pytest.mark.parametrize("layer_norm", [False, True])
def test_three_layer_finite_differences(layer_norm):
    spec = nc.MlpSpec(5, (16, 12), 3, use_layer_norm=layer_norm, label_embedding_dim=4, num_labels=6)
    p = nc.init_params(spec, np.random.default_rng(7), dtype=np.float64)
    for name in p.names():
        if name.endswith(".b") or name.endswith(".ln_b"):
            p.entries[name][...] = np.random.default_rng(8).normal(0, 0.1, p.entries[name].shape)
    x = np.random.default_rng(9).standard_normal((10, 5))
    assert fd_check(spec, p, x, np.arange(10) % 6) < 1e-3


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.lists(st.integers(2, 10), min_size=1, max_size=3), st.integers(1, 3),
       st.booleans(), st.integers(0, 10_000))
def test_gradients_match_finite_differences(in_dim, hidden, out_dim, layer_norm, seed):
    spec = nc.MlpSpec(in_dim, tuple(hidden), out_dim, use_layer_norm=layer_norm)
    rng = np.random.default_rng(seed)
    p = nc.init_params(spec, rng, dtype=np.float64)
    for name in p.names():
        if name.endswith(".b"):
            p.entries[name][...] = rng.normal(0, 0.1, p.entries[name].shape)
    x = rng.standard_normal((7, in_dim))
    _, cache = nc.mlp_forward_cached(spec, p, x)
    # relu is not differentiable at 0; keep perturbations clear of the kink
    assume(min(np.abs(a).min() for a in cache["pre"]) > 1e-2)
    assert fd_check(spec, p, x, None, seed=seed) < 1e-3


def test_embedding_gradient_only_touches_used_rows():
    spec = nc.MlpSpec(3, (8,), 2, label_embedding_dim=4, num_labels=5)
    p = nc.init_params(spec, np.random.default_rng(0), dtype=np.float64)
    x = np.random.default_rng(1).standard_normal((6, 3))
    labels = np.full(6, 2)
    grads = nc.backward(spec, p, x, np.ones((6, 2)), labels)
    others = np.delete(grads["embed"], 2, axis=0)
    assert not others.any()
    assert grads["embed"][2].any()
    assert fd_check(spec, p, x, labels) < 1e-3


def test_embed_label():
    spec = nc.MlpSpec(2, (4,), 1, label_embedding_dim=3, num_labels=3)
    p = nc.init_params(spec, np.random.default_rng(0))
    p.entries["embed"][...] = np.eye(3)
    np.testing.assert_array_equal(nc.embed_label(p, 0), [1, 0, 0])
    np.testing.assert_array_equal(nc.embed_label(p, 1), nc.embed_label(p, 1))
    with pytest.raises(ValueError):
        nc.embed_label(p, 3)
    with pytest.raises(ValueError):
        nc.embed_label(p, -1)


def test_shape_mismatch_rejected():
    spec = nc.MlpSpec(3, (4,), 2)
    p = nc.init_params(spec, np.random.default_rng(0))
    with pytest.raises(ValueError):
        nc.mlp_forward(spec, p, np.zeros((2, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        nc.backward(spec, p, np.zeros((2, 3), dtype=np.float32), np.zeros((2, 3), dtype=np.float32))


def test_adam_zero_gradient_keeps_parameters():
    spec = nc.MlpSpec(3, (4,), 2)
    p = nc.init_params(spec, np.random.default_rng(0))
    before = p.flat.copy()
    nc.adam_step(p, {n: np.zeros_like(a) for n, a in p.entries.items()}, nc.OptimizerConfig())
    np.testing.assert_array_equal(p.flat, before)


def test_adam_first_step_is_learning_rate():
    p = nc.ParameterSet({"w": np.array([0.0])})
    nc.adam_step(p, {"w": np.array([1.0])}, nc.OptimizerConfig(learning_rate=0.01))
    assert p["w"][0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_scalar_descent():
    p = nc.ParameterSet({"w": np.array([0.0])})
    cfg = nc.OptimizerConfig(learning_rate=0.1)
    for _ in range(100):
        nc.adam_step(p, {"w": 2 * (p["w"] - 3.0)}, cfg)
    assert abs(p["w"][0] - 3.0) < 0.05


def test_adam_flags_non_finite():
    p = nc.ParameterSet({"w": np.array([0.0])})
    with pytest.raises(FloatingPointError, match="w"):
        nc.adam_step(p, {"w": np.array([np.nan])}, nc.OptimizerConfig())


@pytest.mark.parametrize("step,expected", [(0, 1.0), (100, 0.0), (50, 0.5), (150, 0.0)])
def test_cosine_factor(step, expected):
    assert nc.cosine_factor(step, 100) == pytest.approx(expected, abs=1e-12)


def test_polyak():
    tgt = nc.ParameterSet({"w": np.zeros(3)})
    onl = nc.ParameterSet({"w": np.ones(3)})
    nc.polyak_update(tgt, onl, 0.0)
    np.testing.assert_array_equal(tgt["w"], 0.0)
    nc.polyak_update(tgt, onl, 0.005)
    np.testing.assert_allclose(tgt["w"], 0.005)
    nc.polyak_update(tgt, onl, 1.0)
    np.testing.assert_array_equal(tgt["w"], 1.0)
    again = copy.deepcopy(tgt)
    nc.polyak_update(tgt, onl, 1.0)
    np.testing.assert_array_equal(tgt["w"], again["w"])
    with pytest.raises(ValueError):
        nc.polyak_update(tgt, onl, 1.5)


def test_forward_is_deterministic():
    spec = nc.MlpSpec(4, (8,), 2, use_layer_norm=True)
    a = nc.init_params(spec, np.random.default_rng(5))
    b = nc.init_params(spec, np.random.default_rng(5))
    x = np.random.default_rng(6).standard_normal((3, 4)).astype(np.float32)
    np.testing.assert_array_equal(nc.mlp_forward(spec, a, x), nc.mlp_forward(spec, b, x))


def test_parameter_roundtrip(tmp_path):
    spec = nc.MlpSpec(4, (8,), 2, use_layer_norm=True, label_embedding_dim=3, num_labels=4)
    p = nc.init_params(spec, np.random.default_rng(0))
    nc.adam_step(p, {n: np.ones_like(a) for n, a in p.entries.items()}, nc.OptimizerConfig())
    nc.save_parameters(p, tmp_path / "net", {"role": "test"})
    q, meta = nc.load_parameters(tmp_path / "net")
    assert meta["role"] == "test"
    assert q.step_count == 1
    np.testing.assert_array_equal(q.flat, p.flat)
    np.testing.assert_array_equal(q.flat_v, p.flat_v)

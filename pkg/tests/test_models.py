import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lit_ensemble import diffcore as dc
from lit_ensemble.models import (
    MlpParams,
    forward,
    init_mlp,
    input_gradient,
    load_tensors,
    network_expr,
    param_bindings,
    predict_proba,
    save_tensors,
)


def _zero(D=3, H=4, b2=0.0, act="softplus"):
    return MlpParams(np.zeros((H, D)), np.zeros(H), np.zeros(H), b2, act)


def test_init_is_deterministic_with_zero_biases():
    a, b = init_mlp(2, 4, "softplus", seed=7), init_mlp(2, 4, "softplus", seed=7)
    for u, v in zip(a.arrays(), b.arrays()):
        assert np.array_equal(u, v)
    assert not a.b1.any() and a.b2 == 0.0


def test_init_variance():
    D = 5
    p = init_mlp(D, 2000, "relu", seed=0)  # 10^4 draws of W1
    assert p.W1.var() == pytest.approx(2.0 / D, rel=0.1)
    assert p.w2.var() == pytest.approx(2.0 / 2000, rel=0.1)


def test_init_rejects_zero_dims():
    with pytest.raises(ValueError):
        init_mlp(0, 4)
    with pytest.raises(ValueError):
        init_mlp(3, 0)


def test_params_validate():
    with pytest.raises(ValueError):
        MlpParams(np.zeros((4, 3)), np.zeros(3), np.zeros(4), 0.0, "softplus")
    with pytest.raises(ValueError):
        MlpParams(np.full((4, 3), np.nan), np.zeros(4), np.zeros(4), 0.0, "softplus")


def test_forward_constant_and_dead_units():
    assert forward(_zero(b2=0.3), np.array([1.0, -2.0, 5.0])) == pytest.approx(0.3)
    p = init_mlp(3, 6, "relu", seed=1)
    p = p.replace_arrays([np.abs(p.W1), p.b1, p.w2, -0.4])
    assert forward(p, -10.0 * np.ones(3)) == -0.4


def test_forward_matches_engine():
    rng = np.random.default_rng(3)
    p = init_mlp(4, 7, "softplus", seed=3)
    x = rng.normal(size=4)
    xv = dc.var("x", (4,), role="input")
    e = network_expr("m", 4, 7, "softplus", xv)
    b = {**param_bindings(p, "m"), "x": x}
    assert forward(p, x) == pytest.approx(dc.evaluate(e, b), abs=1e-12)
    g = dc.evaluate(dc.differentiate(e, [xv])["x"], b)
    np.testing.assert_allclose(input_gradient(p, x), g, atol=1e-12)


def test_input_gradient_identity_activation_is_constant():
    p = init_mlp(3, 5, "identity", seed=2)
    expected = p.W1.T @ p.w2
    for x in np.random.default_rng(0).normal(size=(4, 3)):
        np.testing.assert_allclose(input_gradient(p, x), expected, atol=1e-14)


def test_input_gradient_zero_output_weights():
    p = init_mlp(3, 5, "softplus", seed=2)
    p = p.replace_arrays([p.W1, p.b1, np.zeros(5), 0.0])
    assert not input_gradient(p, np.ones(3)).any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_input_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = init_mlp(3, 8, "softplus", seed=seed)
    x = rng.normal(size=3)
    h = 1e-5
    fd = np.array([(forward(p, x + h * e) - forward(p, x - h * e)) / (2 * h) for e in np.eye(3)])
    g = input_gradient(p, x)
    assert np.max(np.abs(fd - g) / np.maximum(1.0, np.abs(g))) < 1e-4


def test_input_gradient_is_continuous_for_softplus():
    p = init_mlp(3, 16, "softplus", seed=5)
    x = np.array([0.2, -0.1, 0.4])
    g0, g1 = input_gradient(p, x), input_gradient(p, x + 1e-6)
    assert np.linalg.norm(g0 - g1) <= 1e-3 * np.linalg.norm(g0)


def test_predict_proba():
    assert predict_proba(_zero(), np.zeros(3)) == 0.5
    assert predict_proba(_zero(b2=1e3), np.zeros(3)) == pytest.approx(1.0, abs=1e-12)
    p = init_mlp(3, 5, "softplus", seed=0)
    X = np.random.default_rng(0).normal(size=(50, 3))
    f, pr = forward(p, X), predict_proba(p, X)
    order = np.argsort(f)
    assert np.all(np.diff(pr[order]) >= 0)
    assert np.all((pr > 0) & (pr < 1))


def test_batch_and_single_point_agree():
    p = init_mlp(3, 5, "relu", seed=0)
    X = np.random.default_rng(1).normal(size=(6, 3))
    np.testing.assert_allclose(forward(p, X), [forward(p, x) for x in X], rtol=0, atol=1e-14)
    np.testing.assert_allclose(input_gradient(p, X), np.stack([input_gradient(p, x) for x in X]), rtol=0, atol=1e-14)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        forward(init_mlp(3, 4), np.ones(2))


def test_tensor_round_trip_is_bit_exact(tmp_path):
    p = init_mlp(4, 6, "softplus", seed=9)
    tensors = {"W1": p.W1, "b1": p.b1 + 1 / 3, "w2": p.w2, "b2": np.array(np.pi)}
    path = tmp_path / "t.txt"
    save_tensors(path, tensors, {"note": "hello world"})
    back, meta = load_tensors(path)
    assert meta == {"note": "hello world"}
    for k, v in tensors.items():
        assert back[k].shape == np.shape(v)
        assert np.array_equal(back[k], v)

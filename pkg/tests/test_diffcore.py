import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lit_ensemble import diffcore as dc
from lit_ensemble.models import init_mlp, network_expr, param_bindings, param_names


def test_evaluate_hand_values():
    x = dc.var("x")
    assert dc.evaluate(x * x, {"x": 3.0}) == 9.0
    assert dc.evaluate(dc.softplus(dc.const(0.0)), {}) == pytest.approx(math.log(2), abs=1e-15)
    assert dc.evaluate(dc.relu(dc.const(-2.0)), {}) == 0.0


def test_first_derivatives():
    x = dc.var("x")
    assert dc.evaluate(dc.differentiate(x * x, [x])["x"], {"x": 3.0}) == pytest.approx(6.0)
    d = dc.differentiate(dc.softplus(x), ["x"])["x"]
    assert dc.evaluate(d, {"x": 0.0}) == pytest.approx(0.5)


def test_relu_kink_uses_zero_derivative():
    x = dc.var("x")
    d = dc.differentiate(dc.relu(x), [x])["x"]
    assert dc.evaluate(d, {"x": 0.0}) == 0.0
    assert dc.evaluate(d, {"x": 1e-300}) == 1.0


def test_second_order_closure():
    # d/dtheta [ d/dx (theta x^2) ] = 2x
    x, th = dc.var("x", role="input"), dc.var("theta")
    inner = dc.differentiate(th * x * x, [x])["x"]
    outer = dc.differentiate(inner, [th])["theta"]
    assert dc.evaluate(outer, {"x": 1.5, "theta": 0.7}) == pytest.approx(3.0)


def test_errors():
    x = dc.var("x", (2,))
    with pytest.raises(dc.UnboundVariableError):
        dc.evaluate(dc.sqnorm(x), {})
    with pytest.raises(dc.ShapeError):
        dc.evaluate(dc.sqnorm(x), {"x": np.ones(3)})
    with pytest.raises(dc.ShapeError):
        dc.add(x, dc.var("y", (3,)))
    with pytest.raises(dc.NonFiniteError):
        dc.evaluate(dc.log(dc.var("z")), {"z": 0.0})


def test_check_gradient_square():
    x = dc.var("x")
    assert dc.check_gradient(x * x, {"x": 3.0}, ["x"], h=1e-5) < 1e-7


def test_evaluate_is_deterministic():
    p = init_mlp(3, 5, "softplus", seed=1)
    x = dc.var("x", (3,), role="input")
    f = network_expr("m", 3, 5, "softplus", x)
    b = {**param_bindings(p, "m"), "x": np.array([0.3, -0.2, 1.1])}
    assert dc.evaluate(f, b) == dc.evaluate(f, b)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mlp_logit_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    D, H = int(rng.integers(1, 4)), int(rng.integers(1, 6))
    p = init_mlp(D, H, "softplus", seed=seed)
    p = p.replace_arrays([p.W1, rng.normal(size=H) * 0.3, p.w2, 0.1])
    x = dc.var("x", (D,), role="input")
    f = network_expr("m", D, H, "softplus", x)
    b = {**param_bindings(p, "m"), "x": rng.normal(size=D)}
    assert dc.check_gradient(f, b, param_names("m") + ["x"], h=1e-5) < 1e-4


_UNARY = {
    "softplus": dc.softplus,
    "sigmoid": dc.sigmoid,
    "tanh": dc.tanh,
    "sqrt_sq": lambda a: dc.sqrt(dc.add(dc.mul(a, a), dc.const(np.ones(a.shape)))),
    "log_sp": lambda a: dc.log(dc.softplus(a)),
}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(sorted(_UNARY)))
def test_every_node_kind_against_finite_differences(seed, kind):
    rng = np.random.default_rng(seed)
    A = dc.var("A", (3, 2))
    u = dc.var("u", (2,))
    v = dc.var("v", (3,))
    z = dc.matvec(A, u)
    e = dc.add(dc.dot(_UNARY[kind](z), v), dc.div(dc.sqnorm(u), dc.add(dc.sqnorm(v), dc.const(1.0))))
    e = dc.add(e, dc.total(dc.outer(u, u)))
    e = dc.sub(e, dc.dot(dc.matvec(dc.transpose(A), v), u))
    e = dc.add(e, dc.mul(dc.const(0.5), dc.total(dc.clip(v, -10.0, 10.0))))
    b = {"A": rng.normal(size=(3, 2)), "u": rng.normal(size=2), "v": rng.normal(size=3)}
    assert dc.check_gradient(e, b, ["A", "u", "v"], h=1e-5) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_second_derivative_values_match_finite_differences(seed):
    # the input gradient of a network, differentiated wrt parameters
    rng = np.random.default_rng(seed)
    p = init_mlp(2, 3, "softplus", seed=seed)
    x = dc.var("x", (2,), role="input")
    f = network_expr("m", 2, 3, "softplus", x)
    g = dc.differentiate(f, [x])["x"]
    e = dc.dot(g, dc.const(rng.normal(size=2)))
    b = {**param_bindings(p, "m"), "x": rng.normal(size=2)}
    assert dc.check_gradient(e, b, ["m.W1", "m.b1", "m.w2"], h=1e-5) < 1e-4


def test_substitute_binds_inputs():
    x, y = dc.var("x"), dc.var("y")
    e = dc.substitute(x * y, {"x": 2.0})
    assert set(dc.free_variables(e)) == {"y"}
    assert dc.evaluate(e, {"y": 4.0}) == 8.0


def test_unsupported_wrt_variable_gives_zero():
    x, y = dc.var("x"), dc.var("y")
    d = dc.differentiate(x * x, [y])["y"]
    assert dc.evaluate(d, {}) == 0.0

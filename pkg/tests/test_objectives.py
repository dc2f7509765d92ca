import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy.special import expit, logit

from lit_ensemble import diffcore as dc
from lit_ensemble.models import MlpParams, init_mlp
from lit_ensemble.objectives import (
    PenaltyConfig,
    ace_loss_and_grads,
    ace_objective,
    cos_sq,
    ensemble_bindings,
    ensemble_param_names,
    lit_loss_and_grads,
    lit_objective,
    manif_cos_sq,
    ncl_loss_and_grads,
    ncl_objective,
    nll,
)

finite = st.floats(-10, 10, allow_nan=False)
vec3 = st.lists(finite, min_size=3, max_size=3).map(np.array)


def _linear(w, b=0.0):
    """One-unit identity-activation net computing ``w . x + b``."""
    w = np.asarray(w, dtype=float)
    return MlpParams(w[None, :], np.zeros(1), np.ones(1), float(b), "identity")


def _random_pair(seed, D=2, H=3):
    rng = np.random.default_rng(seed)
    ms = []
    for m in range(2):
        p = init_mlp(D, H, "softplus", seed=[seed, m])
        ms.append(p.replace_arrays([p.W1, 0.3 * rng.normal(size=H), p.w2, 0.1 * rng.normal()]))
    X = rng.normal(size=(3, D))
    y = (rng.random(3) > 0.5).astype(float)
    return ms, X, y


def _engine_grads(e, models):
    names = ensemble_param_names(models)
    d = dc.differentiate(e, names)
    b = ensemble_bindings(models)
    return [[dc.evaluate(d[f"m{i}.{k}"], b) for k in ("W1", "b1", "w2", "b2")] for i in range(len(models))]


# -- nll / cosines ------------------------------------------------------------------


def test_nll_values():
    assert nll(0.0, 1) == pytest.approx(math.log(2))
    assert nll(0.0, 0) == pytest.approx(math.log(2))
    assert nll(10.0, 1) == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-12)
    assert nll(10.0, 1) == pytest.approx(4.54e-5, rel=1e-3)


def test_cos_sq_examples():
    assert cos_sq([1, 0], [0, 1]) == 0.0
    assert cos_sq([1, 0], [1, 1]) == pytest.approx(0.5, abs=1e-7)
    assert cos_sq([2, -1], [2, -1]) == pytest.approx(1.0, abs=1e-7)
    assert cos_sq([0, 0], [1, 1]) == 0.0


@given(vec3, vec3)
def test_cos_sq_bounded_and_symmetric(a, b):
    v = cos_sq(a, b)
    assert 0.0 <= v <= 1.0
    assert v == cos_sq(b, a)


@given(vec3, vec3, st.floats(0.1, 100), st.floats(0.1, 100))
def test_cos_sq_scale_invariance(a, b, s, t):
    assume(min(np.linalg.norm(a), np.linalg.norm(b)) > 1e-3)
    # the 1e-8 stabiliser shifts cos2 by a relative 2e-8 / (|g1| |g2|) at most
    p = min(np.linalg.norm(a) * np.linalg.norm(b), np.linalg.norm(s * a) * np.linalg.norm(t * b))
    assert cos_sq(s * a, t * b) == pytest.approx(cos_sq(a, b), abs=1e-12 + 4e-8 / p)


def test_manif_cos_sq_examples():
    g1, g2 = np.array([1.0, 0, 1]), np.array([0, 1.0, 1])
    J = np.eye(3)[:, :2]
    assert cos_sq(g1, g2) == pytest.approx(0.25, abs=1e-7)
    assert manif_cos_sq(g1, g2, J) == 0.0
    assert manif_cos_sq(g1, g2, np.eye(3)) == cos_sq(g1, g2)
    assert manif_cos_sq(g1, g2, np.array([[1.0], [2.0], [0.5]])) == pytest.approx(1.0, abs=1e-7)
    with pytest.raises(ValueError):
        manif_cos_sq(g1, g2, np.ones((2, 2)))


def test_penalty_config_invariants():
    with pytest.raises(ValueError):
        PenaltyConfig(lam=-1)
    with pytest.raises(ValueError):
        PenaltyConfig(lam=1, denom_epsilon=0)


# -- LIT --------------------------------------------------------------------------


def test_lit_lambda_zero_is_sum_of_nll_expressions():
    ms, X, y = _random_pair(4)
    joint = dc.evaluate(lit_objective(ms, (X, y), PenaltyConfig(0.0)), ensemble_bindings(ms))
    a = dc.evaluate(lit_objective([ms[0]], (X, y), PenaltyConfig(0.0)), ensemble_bindings([ms[0]]))
    b = dc.evaluate(lit_objective([ms[1]], (X, y), PenaltyConfig(0.0)), ensemble_bindings([ms[1]]))
    assert joint == a + b
    total, nlls, _, _ = lit_loss_and_grads(ms, X, y, 0.0)
    assert total == pytest.approx(a + b, abs=1e-14)


def test_lit_single_model_has_no_penalty():
    ms, X, y = _random_pair(5)
    e0 = lit_objective(ms[:1], (X, y), PenaltyConfig(0.0))
    e1 = lit_objective(ms[:1], (X, y), PenaltyConfig(7.0))
    b = ensemble_bindings(ms[:1])
    assert dc.evaluate(e0, b) == dc.evaluate(e1, b)


def test_lit_orthogonal_linear_models_hand_computation():
    f1, f2 = _linear([1.0, 0.0], 0.2), _linear([0.0, 2.0], -0.1)
    X = np.array([[0.5, -1.0], [-0.3, 0.4], [1.2, 0.0]])
    y = np.array([1.0, 0.0, 1.0])
    hand = sum(np.mean(np.logaddexp(0, X @ w + b) - y * (X @ w + b))
               for w, b in (([1.0, 0.0], 0.2), ([0.0, 2.0], -0.1)))
    e = lit_objective([f1, f2], (X, y), PenaltyConfig(3.0))
    assert dc.evaluate(e, ensemble_bindings([f1, f2])) == pytest.approx(hand, abs=1e-12)
    total, _, penalty, _ = lit_loss_and_grads([f1, f2], X, y, 3.0)
    assert penalty == 0.0
    assert total == pytest.approx(hand, abs=1e-12)


def test_lit_parallel_linear_models_penalty_counts_ordered_pairs():
    f1, f2 = _linear([1.0, 1.0]), _linear([2.0, 2.0])
    X, y = np.zeros((2, 2)), np.array([0.0, 1.0])
    _, _, penalty, _ = lit_loss_and_grads([f1, f2], X, y, 1.0)
    assert penalty == pytest.approx(2.0, abs=1e-7)


@pytest.mark.parametrize("seed", range(10))
def test_lit_engine_matches_finite_differences(seed):
    ms, X, y = _random_pair(seed)
    e = lit_objective(ms, (X, y), PenaltyConfig(0.7))
    assert dc.check_gradient(e, ensemble_bindings(ms), ensemble_param_names(ms), h=1e-4) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_lit_manifold_engine_matches_finite_differences(seed):
    ms, X, y = _random_pair(seed, D=3)
    T = np.random.default_rng(seed).normal(size=(3, 3, 2))
    e = lit_objective(ms, (X, y), PenaltyConfig(0.7), tangents=T)
    assert dc.check_gradient(e, ensemble_bindings(ms), ensemble_param_names(ms), h=1e-4) < 1e-3


@pytest.mark.parametrize("manifold", [False, True])
@pytest.mark.parametrize("seed", range(5))
def test_lit_closed_form_matches_engine(seed, manifold):
    ms, X, y = _random_pair(seed, D=3)
    T = np.random.default_rng(seed).normal(size=(3, 3, 2)) if manifold else None
    e = lit_objective(ms, (X, y), PenaltyConfig(0.7), tangents=T)
    total, _, _, grads = lit_loss_and_grads(ms, X, y, 0.7, tangents=T)
    assert total == pytest.approx(dc.evaluate(e, ensemble_bindings(ms)), abs=1e-12)
    for gm, em in zip(grads, _engine_grads(e, ms)):
        for a, b in zip(gm, em):
            np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


# -- NCL ----------------------------------------------------------------------------


def _two_point_models(p_first, p_second):
    """Linear nets on x in {0, 1} whose probabilities at (0, 1) are given."""
    out = []
    for a, b in zip(p_first, p_second):
        b0 = logit(a)
        out.append(_linear([logit(b) - b0], b0))
    return out


def test_ncl_hand_example():
    # member probabilities: model 1 (0.8, 0.6), model 2 (0.2, 0.4) on points 1, 2
    ms = _two_point_models([0.8, 0.2], [0.6, 0.4])
    X, y = np.array([[0.0], [1.0]]), np.array([1.0, 0.0])
    P = np.array([[0.8, 0.6], [0.2, 0.4]])
    dev = P[0] - P.mean(axis=0)
    expected_pen = -2.0 * np.mean(dev**2)
    brier = np.sum(np.mean((P - y) ** 2, axis=1))
    total, _, pen, _ = ncl_loss_and_grads(ms, X, y, 0.5)
    assert pen == pytest.approx(expected_pen, abs=1e-12)
    assert total == pytest.approx(brier + 0.5 * expected_pen, abs=1e-12)
    e = ncl_objective(ms, (X, y), 0.5)
    assert dc.evaluate(e, ensemble_bindings(ms)) == pytest.approx(total, abs=1e-12)


def test_ncl_identical_models_and_lambda_zero():
    ms, X, y = _random_pair(2)
    _, _, pen, _ = ncl_loss_and_grads([ms[0], ms[0]], X, y, 3.0)
    assert pen == pytest.approx(0.0, abs=1e-15)
    total, briers, _, _ = ncl_loss_and_grads(ms, X, y, 0.0)
    assert total == sum(briers)
    with pytest.raises(ValueError):
        ncl_objective(ms[:1], (X, y), 1.0)


# -- ACE -----------------------------------------------------------------------------


def test_ace_constant_models_hand_example():
    ms = [_linear([0.0], logit(0.9)), _linear([0.0], logit(0.1))]
    X, y = np.zeros((1, 1)), np.ones(1)
    _, _, xent, _ = ace_loss_and_grads(ms, X, y, 1.0)
    h = lambda p, q: -(p * math.log(q) + (1 - p) * math.log(1 - q))  # noqa: E731
    assert h(0.1, 0.9) == pytest.approx(-(0.1 * math.log(0.9) + 0.9 * math.log(0.1)))
    assert xent == pytest.approx(h(0.9, 0.1) + h(0.1, 0.9), abs=1e-12)


def test_ace_identical_models_give_entropy_and_lambda_zero():
    ms, X, y = _random_pair(3)
    p = expit(np.array([float(np.dot(ms[0].w2, np.logaddexp(0, ms[0].W1 @ x + ms[0].b1)) + ms[0].b2) for x in X]))
    _, _, xent, _ = ace_loss_and_grads([ms[0], ms[0]], X, y, 1.0)
    entropy = np.mean(-(p * np.log(p) + (1 - p) * np.log1p(-p)))
    assert xent == pytest.approx(2 * entropy, abs=1e-12)
    total, nlls, _, _ = ace_loss_and_grads(ms, X, y, 0.0)
    assert total == sum(nlls)


@pytest.mark.parametrize("seed", range(5))
def test_ncl_and_ace_closed_form_match_engine(seed):
    ms, X, y = _random_pair(seed)
    for build, closed in ((ncl_objective, ncl_loss_and_grads), (ace_objective, ace_loss_and_grads)):
        e = build(ms, (X, y), 0.6)
        total, _, _, grads = closed(ms, X, y, 0.6)
        assert total == pytest.approx(dc.evaluate(e, ensemble_bindings(ms)), abs=1e-12)
        for gm, em in zip(grads, _engine_grads(e, ms)):
            for a, b in zip(gm, em):
                np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
        assert dc.check_gradient(e, ensemble_bindings(ms), ensemble_param_names(ms), h=1e-5) < 1e-3


def test_empty_batch_rejected():
    ms, _, _ = _random_pair(0)
    with pytest.raises(ValueError):
        lit_objective(ms, (np.zeros((0, 2)), np.zeros(0)), PenaltyConfig(1.0))

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lit_ensemble.diversity import (
    IndepOracleConfig,
    PairContingency,
    UndefinedMetricError,
    cos_indep_err,
    ensemble_cos2,
    error_correlation_rho,
    indep_err_oracle,
    kappa,
    kappa_average,
    mutual_info_from_cos,
    perturbation_correlation,
    q_average,
    q_statistic,
)
from lit_ensemble.models import MlpParams, init_mlp, input_gradient


def _linear(w, b=0.0):
    w = np.asarray(w, dtype=float)
    return MlpParams(w[None, :], np.zeros(1), np.ones(1), float(b), "identity")


X3 = np.random.default_rng(0).normal(size=(40, 3))


# -- gradient-based ---------------------------------------------------------------


def test_cos_indep_err_examples():
    f = init_mlp(3, 8, "softplus", seed=1)
    assert cos_indep_err(f, f, X3) == pytest.approx(1.0, abs=1e-7)
    assert cos_indep_err(_linear([1, 0, 0]), _linear([0, 2, 0]), X3) == 0.0
    with pytest.raises(ValueError):
        cos_indep_err(f, f, np.zeros((0, 3)))


def test_cos_indep_err_symmetric_and_scale_invariant():
    f, g = init_mlp(3, 8, "softplus", seed=1), init_mlp(3, 8, "softplus", seed=2)
    v = cos_indep_err(f, g, X3)
    assert cos_indep_err(g, f, X3) == pytest.approx(v, abs=1e-15)
    g5 = g.replace_arrays([g.W1, g.b1, 5.0 * g.w2, g.b2])
    assert cos_indep_err(f, g5, X3) == pytest.approx(v, abs=1e-6)


def test_ensemble_cos2_averages_unordered_pairs():
    ms = [init_mlp(3, 8, "softplus", seed=s) for s in range(3)]
    pairs = [cos_indep_err(ms[i], ms[j], X3) for i, j in ((0, 1), (0, 2), (1, 2))]
    avg = ensemble_cos2(ms, X3)
    assert avg.pairs == 3
    assert avg.value == pytest.approx(np.mean(pairs), abs=1e-15)
    assert not ensemble_cos2(ms[:1], X3).defined


def test_oracle_constant_g_is_zero():
    f = init_mlp(3, 8, "softplus", seed=1)
    g = _linear([0, 0, 0], 1.0)
    assert indep_err_oracle(f, g, X3, IndepOracleConfig(0.1)) == 0.0


def test_oracle_shared_unit_gradient():
    f = _linear([0.6, 0.8, 0.0])
    assert indep_err_oracle(f, f, X3, IndepOracleConfig(0.01)) == pytest.approx(1e-4, rel=1e-9)


def test_oracle_orthogonal_linear_pair():
    f, g = _linear([1, 0, 0]), _linear([0, 1, 0])
    assert indep_err_oracle(f, g, X3, IndepOracleConfig(1e-3)) <= 1e-8


def test_oracle_config_validation():
    with pytest.raises(ValueError):
        IndepOracleConfig(0.0)
    with pytest.raises(ValueError):
        IndepOracleConfig(1e-3, steps=0)
    assert IndepOracleConfig(1e-3).rate == pytest.approx(1e-4)


def test_perturbation_correlation_signs():
    f = init_mlp(3, 8, "softplus", seed=3)
    neg = f.replace_arrays([f.W1, f.b1, -f.w2, -f.b2])
    x = X3[0]
    assert perturbation_correlation(f, f, x, 1e-3, 500, seed=0) == pytest.approx(1.0, abs=1e-9)
    assert perturbation_correlation(f, neg, x, 1e-3, 500, seed=0) == pytest.approx(-1.0, abs=1e-9)
    with pytest.raises(UndefinedMetricError):
        perturbation_correlation(f, _linear([0, 0, 0]), x, 1e-3, 100)
    with pytest.raises(ValueError):
        perturbation_correlation(f, f, x, 0.0, 100)


def test_perturbation_correlation_approaches_gradient_cosine():
    f, g = init_mlp(3, 8, "softplus", seed=4), init_mlp(3, 8, "softplus", seed=5)
    x = X3[1]
    gf, gg = input_gradient(f, x), input_gradient(g, x)
    c = gf @ gg / np.linalg.norm(gf) / np.linalg.norm(gg)
    errs = [abs(perturbation_correlation(f, g, x, s, 100_000, seed=1) - c) for s in (1e-1, 1e-4)]
    assert errs[1] < errs[0]
    assert errs[1] <= 0.02


def test_perturbation_streams_are_order_independent():
    f, g = init_mlp(3, 8, "softplus", seed=4), init_mlp(3, 8, "softplus", seed=5)
    a = [perturbation_correlation(f, g, X3[i], 1e-3, 200, seed=9, stream=i) for i in range(3)]
    b = [perturbation_correlation(f, g, X3[i], 1e-3, 200, seed=9, stream=i) for i in reversed(range(3))]
    assert a == b[::-1]


def test_mutual_information():
    assert mutual_info_from_cos(0.0) == 0.0
    assert mutual_info_from_cos(0.6) == pytest.approx(-0.5 * math.log(0.64), abs=1e-15)
    assert mutual_info_from_cos(0.6) == pytest.approx(0.2231, abs=1e-4)
    for c in (1.0, -1.0, 1.5):
        with pytest.raises(UndefinedMetricError):
            mutual_info_from_cos(c)


# -- prediction-based -------------------------------------------------------------


def test_rho_examples():
    y = np.zeros(4, dtype=int)
    # wrong where the prediction is 1
    assert error_correlation_rho(np.array([[1, 1, 0, 0], [1, 1, 0, 0]]), y).value == pytest.approx(1.0)
    assert error_correlation_rho(np.array([[1, 1, 0, 0], [0, 0, 1, 1]]), y).value == pytest.approx(-1.0)
    assert error_correlation_rho(np.array([[1, 1, 0, 0], [1, 0, 1, 0]]), y).value == pytest.approx(0.0, abs=1e-15)


def test_rho_degenerate_pairs_are_undefined_not_zero():
    y = np.zeros(4, dtype=int)
    r = error_correlation_rho(np.zeros((2, 4), dtype=int), y)
    assert r.value is None and r.excluded == 1
    r = error_correlation_rho(np.array([[0, 0, 0, 0], [1, 0, 1, 0], [1, 1, 0, 0]]), y)
    assert r.pairs == 1 and r.excluded == 2


def test_q_statistic_examples():
    assert q_statistic(PairContingency(5, 0, 0, 7)) == 1.0
    assert q_statistic(PairContingency(0, 3, 4, 0)) == -1.0
    assert q_statistic(PairContingency(30, 10, 20, 40)) == pytest.approx(5 / 7, abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        q_statistic(PairContingency(0, 3, 0, 0))


def test_kappa_examples():
    # p_obs = 0.7, marginal correct rates 0.4 and 0.5, p_exp = 0.5
    assert kappa(PairContingency(30, 10, 20, 40)) == pytest.approx(0.4, abs=1e-12)
    assert kappa(PairContingency(6, 0, 0, 4)) == pytest.approx(1.0)
    with pytest.raises(UndefinedMetricError):
        kappa(PairContingency(10, 0, 0, 0))


def test_kappa_chance_agreement():
    rng = np.random.default_rng(0)
    a, b = rng.random(100_000) < 0.5, rng.random(100_000) < 0.5
    assert abs(kappa(PairContingency.from_correct(a, b))) < 0.01


def test_contingency_validation():
    with pytest.raises(ValueError):
        PairContingency(-1, 0, 0, 0)
    with pytest.raises(ValueError):
        PairContingency.from_correct([1, 0], [1])


def test_duplicated_members_score_one_on_every_metric():
    y = np.array([0, 1, 1, 0, 1, 0])
    pred = np.array([0, 1, 0, 0, 1, 1])
    preds = np.stack([pred, pred])
    for avg in (error_correlation_rho(preds, y), q_average(preds, y), kappa_average(preds, y)):
        assert avg.value == pytest.approx(1.0)


@settings(max_examples=100)
@given(st.integers(2, 5), st.integers(2, 30), st.integers(0, 2**31 - 1))
def test_defined_metrics_lie_in_unit_interval(M, n, seed):
    rng = np.random.default_rng(seed)
    preds = rng.integers(0, 2, size=(M, n))
    y = rng.integers(0, 2, size=n)
    for avg in (error_correlation_rho(preds, y), q_average(preds, y), kappa_average(preds, y)):
        if avg.defined:
            assert -1.0 - 1e-12 <= avg.value <= 1.0 + 1e-12
        assert avg.pairs + avg.excluded == M * (M - 1) // 2 or not avg.defined

"""Diversity and local-independence measures for pairs and ensembles of models.

Gradient-based measures (``cos_indep_err``, the projected-ascent oracle, the
perturbation correlation) need no labels. The classic prediction-diversity
statistics (error correlation, Yule's Q, interrater kappa) work on 0/1
correctness of thresholded predictions.

Undefined pairwise values (constant indicator vectors, zero denominators) are
excluded from averages and counted; an average with no defined pair has
``value=None``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .models import MlpParams, forward, input_gradient
from .objectives import DENOM_EPSILON

__all__ = [
    "UndefinedMetricError",
    "PairContingency",
    "PairAverage",
    "IndepOracleConfig",
    "pairwise_cos_sq",
    "cos_indep_err",
    "ensemble_cos2",
    "ascend_within_ball",
    "indep_err_oracle",
    "error_correlation_rho",
    "q_statistic",
    "kappa",
    "q_average",
    "kappa_average",
    "perturbation_correlation",
    "mutual_info_from_cos",
]


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (not the same as zero)."""


@dataclass(frozen=True)
class PairContingency:
    n11: int  # both correct
    n10: int  # only the first correct
    n01: int  # only the second correct
    n00: int  # both wrong

    def __post_init__(self):
        if min(self.n11, self.n10, self.n01, self.n00) < 0:
            raise ValueError("contingency counts must be non-negative")

    @property
    def n(self) -> int:
        return self.n11 + self.n10 + self.n01 + self.n00

    @classmethod
    def from_correct(cls, correct1, correct2) -> "PairContingency":
        a = np.asarray(correct1, dtype=bool)
        b = np.asarray(correct2, dtype=bool)
        if a.shape != b.shape:
            raise ValueError("indicator vectors differ in length")
        return cls(int(np.sum(a & b)), int(np.sum(a & ~b)), int(np.sum(~a & b)), int(np.sum(~a & ~b)))


@dataclass(frozen=True)
class PairAverage:
    value: Optional[float]
    pairs: int
    excluded: int = 0
    reason: Optional[str] = None

    @property
    def defined(self) -> bool:
        return self.value is not None


@dataclass(frozen=True)
class IndepOracleConfig:
    epsilon: float = 1e-3
    steps: int = 20
    step_size: Optional[float] = None  # defaults to epsilon / 10

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")

    @property
    def rate(self) -> float:
        return self.epsilon / 10 if self.step_size is None else self.step_size


# -- gradient-based -------------------------------------------------------------


def pairwise_cos_sq(G1: np.ndarray, G2: np.ndarray, denom_epsilon: float = DENOM_EPSILON) -> np.ndarray:
    """Row-wise squared cosine between two stacks of gradients (n x K)."""
    dots = np.einsum("nk,nk->n", G1, G2)
    den = np.linalg.norm(G1, axis=1) * np.linalg.norm(G2, axis=1) + denom_epsilon
    return dots**2 / den**2


def _project(G: np.ndarray, tangents) -> np.ndarray:
    return G if tangents is None else np.einsum("nd,ndk->nk", G, tangents)


def cos_indep_err(f: MlpParams, g: MlpParams, X, tangents=None, denom_epsilon: float = DENOM_EPSILON) -> float:
    """Mean squared cosine between the input gradients of ``f`` and ``g`` over ``X``.

    With ``tangents`` (n x D x K) the gradients are first projected onto the
    tangent space at each point.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("need at least one evaluation point")
    Gf = _project(input_gradient(f, X), tangents)
    Gg = _project(input_gradient(g, X), tangents)
    return float(np.mean(pairwise_cos_sq(Gf, Gg, denom_epsilon)))


def ensemble_cos2(members: Sequence[MlpParams], X, tangents=None) -> PairAverage:
    """``cos_indep_err`` averaged over unordered member pairs."""
    if len(members) < 2:
        return PairAverage(None, 0, 0, "fewer than two members")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    grads = [_project(input_gradient(m, X), tangents) for m in members]
    vals = [float(np.mean(pairwise_cos_sq(grads[i], grads[j])))
            for i, j in itertools.combinations(range(len(members)), 2)]
    return PairAverage(float(np.mean(vals)), len(vals))


def ascend_within_ball(g: MlpParams, X, cfg: IndepOracleConfig) -> np.ndarray:
    """Approximate argmax of ``g`` over the epsilon-ball around each row of ``X``.

    Normalised gradient-ascent steps, each followed by Euclidean projection
    back onto the ball. Rows where the gradient vanishes stay put.
    """
    X0 = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Xc = X0.copy()
    eps = cfg.epsilon
    for _ in range(cfg.steps):
        G = input_gradient(g, Xc)
        norms = np.linalg.norm(G, axis=1, keepdims=True)
        step = np.divide(G, norms, out=np.zeros_like(G), where=norms > 0)
        Xc = Xc + cfg.rate * step
        delta = Xc - X0
        dn = np.linalg.norm(delta, axis=1, keepdims=True)
        Xc = X0 + np.where(dn > eps, delta * (eps / np.maximum(dn, eps)), delta)
    return Xc


def indep_err_oracle(f: MlpParams, g: MlpParams, X, cfg: IndepOracleConfig = IndepOracleConfig()) -> float:
    """Mean squared change of ``f`` when moving each point to ``g``'s local maximiser."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Xg = ascend_within_ball(g, X, cfg)
    return float(np.mean((forward(f, Xg) - forward(f, X)) ** 2))


def perturbation_correlation(f: MlpParams, g: MlpParams, x, sigma: float, n: int, seed=0, stream: int = 0) -> float:
    """Pearson correlation of output changes of ``f`` and ``g`` under N(0, sigma^2 I) noise.

    ``stream`` selects an independent substream so that per-point draws do
    not depend on evaluation order.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if n < 2:
        raise ValueError("need n >= 2 perturbations")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng([int(seed), int(stream)])
    Xp = x + rng.normal(0.0, sigma, size=(n, x.shape[-1]))
    df = forward(f, Xp) - forward(f, x)
    dg = forward(g, Xp) - forward(g, x)
    if np.std(df) == 0 or np.std(dg) == 0:
        raise UndefinedMetricError("zero variance in output changes")
    return float(np.corrcoef(df, dg)[0, 1])


def mutual_info_from_cos(c: float) -> float:
    """Mutual information (nats) of two jointly Gaussian variables with correlation ``c``."""
    c = float(c)
    if not abs(c) < 1:
        raise UndefinedMetricError("mutual information diverges for |correlation| >= 1")
    return -0.5 * np.log1p(-c * c)


# -- prediction-based -----------------------------------------------------------


def _correctness(preds, labels) -> np.ndarray:
    preds = np.atleast_2d(np.asarray(preds))
    labels = np.asarray(labels)
    if preds.shape[1] != labels.shape[0]:
        raise ValueError("predictions and labels differ in length")
    return preds == labels[None, :]


def error_correlation_rho(preds, labels) -> PairAverage:
    """Mean pairwise Pearson correlation of members' 0/1 error indicators.

    ``preds`` is M x n predicted labels. Pairs where either indicator vector
    is constant are excluded.
    """
    wrong = ~_correctness(preds, labels)
    M, n = wrong.shape
    if M < 2 or n < 2:
        return PairAverage(None, 0, 0, "need at least two members and two examples")
    vals, excluded = [], 0
    for i, j in itertools.combinations(range(M), 2):
        a, b = wrong[i].astype(float), wrong[j].astype(float)
        if a.std() == 0 or b.std() == 0:
            excluded += 1
            continue
        vals.append(float(np.corrcoef(a, b)[0, 1]))
    if not vals:
        return PairAverage(None, 0, excluded, "all pairs have constant error indicators")
    return PairAverage(float(np.mean(vals)), len(vals), excluded)


def q_statistic(c: PairContingency) -> float:
    num = c.n11 * c.n00 - c.n01 * c.n10
    den = c.n11 * c.n00 + c.n01 * c.n10
    if den == 0:
        raise UndefinedMetricError("Q undefined: n11*n00 + n01*n10 = 0")
    return num / den


def kappa(c: PairContingency) -> float:
    """Chance-corrected agreement of the two members' correct/incorrect outcomes."""
    n = c.n
    if n == 0:
        raise UndefinedMetricError("empty contingency table")
    p_obs = (c.n11 + c.n00) / n
    r1 = (c.n11 + c.n10) / n
    r2 = (c.n11 + c.n01) / n
    p_exp = r1 * r2 + (1 - r1) * (1 - r2)
    if p_exp == 1:
        raise UndefinedMetricError("kappa undefined: expected agreement is 1")
    return (p_obs - p_exp) / (1 - p_exp)


def _pair_average(stat, preds, labels) -> PairAverage:
    correct = _correctness(preds, labels)
    M = correct.shape[0]
    if M < 2:
        return PairAverage(None, 0, 0, "fewer than two members")
    vals, excluded = [], 0
    for i, j in itertools.combinations(range(M), 2):
        try:
            vals.append(stat(PairContingency.from_correct(correct[i], correct[j])))
        except UndefinedMetricError:
            excluded += 1
    if not vals:
        return PairAverage(None, 0, excluded, "undefined for every pair")
    return PairAverage(float(np.mean(vals)), len(vals), excluded)


def q_average(preds, labels) -> PairAverage:
    return _pair_average(q_statistic, preds, labels)


def kappa_average(preds, labels) -> PairAverage:
    return _pair_average(kappa, preds, labels)

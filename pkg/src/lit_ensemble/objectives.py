"""Ensemble training objectives.

Each objective exists twice:

* as a diffcore expression (``lit_objective``, ``ncl_objective``,
  ``ace_objective``), differentiable to any order and used as a reference;
* as a batched closed-form ``*_loss_and_grads`` function for the one-hidden-
  layer architecture, which is what the trainers call.

The test-suite checks the two against each other and against finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from . import diffcore as dc
from .models import MlpParams, activation_derivatives, network_expr, param_bindings, param_names

__all__ = [
    "PenaltyConfig",
    "DENOM_EPSILON",
    "PROB_CLAMP",
    "nll",
    "cos_sq",
    "manif_cos_sq",
    "lit_objective",
    "ncl_objective",
    "ace_objective",
    "ensemble_bindings",
    "ensemble_param_names",
    "nll_expr",
    "cos_sq_expr",
    "MemberCache",
    "member_forward",
    "member_backward",
    "cos_penalty",
    "nll_loss_and_grads",
    "lit_loss_and_grads",
    "ncl_loss_and_grads",
    "ace_loss_and_grads",
]

DENOM_EPSILON = 1e-8
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class PenaltyConfig:
    lam: float = 0.0
    denom_epsilon: float = DENOM_EPSILON
    pair_mode: str = "ordered"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.denom_epsilon <= 0:
            raise ValueError("denom_epsilon must be positive")
        if self.pair_mode != "ordered":
            raise ValueError("only ordered pairs (sum over l != m) are supported")


# -- scalar helpers -------------------------------------------------------------


def nll(logit, y):
    """Binary cross-entropy with logits, ``softplus(logit) - y*logit``."""
    logit = np.asarray(logit, dtype=np.float64)
    out = np.logaddexp(0.0, logit) - np.asarray(y, dtype=np.float64) * logit
    return float(out) if out.ndim == 0 else out


def cos_sq(g1, g2, denom_epsilon: float = DENOM_EPSILON) -> float:
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise ValueError(f"gradient shapes differ: {g1.shape} vs {g2.shape}")
    den = np.linalg.norm(g1) * np.linalg.norm(g2) + denom_epsilon
    return float(np.dot(g1, g2) ** 2 / den**2)


def manif_cos_sq(g1, g2, J, denom_epsilon: float = DENOM_EPSILON) -> float:
    """Squared cosine between gradients projected onto tangent columns of ``J``."""
    J = np.asarray(J, dtype=np.float64)
    g1 = np.asarray(g1, dtype=np.float64)
    if J.ndim != 2 or J.shape[0] != g1.shape[-1] or J.shape[1] > J.shape[0]:
        raise ValueError(f"tangent Jacobian must be D x K with K <= D, got {J.shape}")
    return cos_sq(g1 @ J, np.asarray(g2, dtype=np.float64) @ J, denom_epsilon)


# -- expression builders --------------------------------------------------------


def nll_expr(logit: dc.Expr, y: float) -> dc.Expr:
    return dc.sub(dc.softplus(logit), dc.mul(dc.const(float(y)), logit))


def cos_sq_expr(g1: dc.Expr, g2: dc.Expr, denom_epsilon: float = DENOM_EPSILON) -> dc.Expr:
    den = dc.add(dc.mul(dc.sqrt(dc.sqnorm(g1)), dc.sqrt(dc.sqnorm(g2))), dc.const(denom_epsilon))
    d = dc.dot(g1, g2)
    return dc.div(dc.mul(d, d), dc.mul(den, den))


def _check_batch(batch):
    X, y = batch
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if y.shape[0] != X.shape[0]:
        raise ValueError("X and y lengths differ")
    return X, y


def _member_graphs(models: Sequence[MlpParams], D: int):
    """Per-model (logit, input-gradient) expressions in a shared input variable."""
    x = dc.var("x", (D,), role="input")
    out = []
    for i, p in enumerate(models):
        if p.dim != D:
            raise ValueError("models disagree on input dimension")
        f = network_expr(f"m{i}", D, p.hidden, p.activation, x)
        g = dc.differentiate(f, [x])["x"]
        out.append((f, g))
    return out


def _mean(terms: list) -> dc.Expr:
    acc = terms[0]
    for t in terms[1:]:
        acc = dc.add(acc, t)
    return dc.div(acc, dc.const(float(len(terms))))


def _sum(terms: list) -> dc.Expr:
    acc = terms[0]
    for t in terms[1:]:
        acc = dc.add(acc, t)
    return acc


def lit_objective(models: Sequence[MlpParams], batch, cfg: PenaltyConfig, tangents=None) -> dc.Expr:
    """Joint NLL plus lambda-weighted ordered-pair mean squared gradient cosine.

    Free variables are the parameters ``m{i}.W1``, ``m{i}.b1``, ``m{i}.w2``,
    ``m{i}.b2``; bind them with :func:`ensemble_bindings`. ``tangents`` (n x D
    x K) switches the penalty to manifold-projected gradients.
    """
    if not models:
        raise ValueError("need at least one model")
    X, y = _check_batch(batch)
    graphs = _member_graphs(models, X.shape[1])
    nll_terms = [[] for _ in models]
    pen_terms = []
    M = len(models)
    for b in range(X.shape[0]):
        xb = {"x": X[b]}
        grads = []
        for m, (f, g) in enumerate(graphs):
            nll_terms[m].append(nll_expr(dc.substitute(f, xb), y[b]))
            if cfg.lam > 0 and M > 1:
                gb = dc.substitute(g, xb)
                if tangents is not None:
                    gb = dc.matvec(dc.const(np.asarray(tangents[b]).T), gb)
                grads.append(gb)
        if grads:
            pairs = [cos_sq_expr(grads[m], grads[l], cfg.denom_epsilon)
                     for m in range(M) for l in range(M) if l != m]
            pen_terms.append(_sum(pairs))
    loss = _sum([_mean(t) for t in nll_terms])
    if pen_terms:
        loss = dc.add(loss, dc.mul(dc.const(cfg.lam), _mean(pen_terms)))
    return loss


def ensemble_bindings(models: Sequence[MlpParams]) -> dict:
    out = {}
    for i, p in enumerate(models):
        out.update(param_bindings(p, f"m{i}"))
    return out


def ensemble_param_names(models: Sequence[MlpParams]) -> list:
    return [n for i in range(len(models)) for n in param_names(f"m{i}")]


def ncl_objective(models: Sequence[MlpParams], batch, lam: float) -> dc.Expr:
    """Brier loss per member plus the negative-correlation penalty on probabilities."""
    if len(models) < 2:
        raise ValueError("NCL needs at least two models")
    X, y = _check_batch(batch)
    graphs = _member_graphs(models, X.shape[1])
    M = len(models)
    brier = [[] for _ in models]
    pen = []
    for b in range(X.shape[0]):
        xb = {"x": X[b]}
        probs = [dc.sigmoid(dc.substitute(f, xb)) for f, _ in graphs]
        for m in range(M):
            r = dc.sub(probs[m], dc.const(y[b]))
            brier[m].append(dc.mul(r, r))
        pbar = dc.div(_sum(probs), dc.const(float(M)))
        dev = [dc.sub(p, pbar) for p in probs]
        pen.append(_sum([dc.mul(dev[m], _sum([dev[l] for l in range(M) if l != m])) for m in range(M)]))
    return dc.add(_sum([_mean(t) for t in brier]), dc.mul(dc.const(float(lam)), _mean(pen)))


def _xent_expr(p: dc.Expr, q: dc.Expr) -> dc.Expr:
    p = dc.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    q = dc.clip(q, PROB_CLAMP, 1 - PROB_CLAMP)
    one = dc.const(1.0)
    return dc.neg(dc.add(dc.mul(p, dc.log(q)), dc.mul(dc.sub(one, p), dc.log(dc.sub(one, q)))))


def ace_objective(models: Sequence[MlpParams], batch, lam: float) -> dc.Expr:
    """Per-member NLL minus lambda/(M-1) times summed pairwise cross-entropies."""
    if len(models) < 2:
        raise ValueError("ACE needs at least two models")
    X, y = _check_batch(batch)
    graphs = _member_graphs(models, X.shape[1])
    M = len(models)
    nlls = [[] for _ in models]
    pen = []
    for b in range(X.shape[0]):
        xb = {"x": X[b]}
        logits = [dc.substitute(f, xb) for f, _ in graphs]
        probs = [dc.sigmoid(f) for f in logits]
        for m in range(M):
            nlls[m].append(nll_expr(logits[m], y[b]))
        pen.append(_sum([_xent_expr(probs[l], probs[m]) for m in range(M) for l in range(M) if l != m]))
    scale = dc.const(float(lam) / (M - 1))
    return dc.sub(_sum([_mean(t) for t in nlls]), dc.mul(scale, _mean(pen)))


# -- batched closed form --------------------------------------------------------


@dataclass
class MemberCache:
    X: np.ndarray
    A: np.ndarray  # hidden activations, B x H
    A1: np.ndarray  # activation first derivative
    A2: np.ndarray  # activation second derivative
    Wout: np.ndarray  # effective output weights per row, B x H
    mask_scale: Optional[np.ndarray]
    f: np.ndarray  # logits, B
    S: np.ndarray  # Wout * A1
    G: np.ndarray  # input gradients, B x D


def member_forward(p: MlpParams, X: np.ndarray, mask_scale: Optional[np.ndarray] = None) -> MemberCache:
    """Forward pass with optional inverted-dropout scale on hidden units (B x H)."""
    Z = X @ p.W1.T + p.b1
    A, A1, A2 = activation_derivatives(p.activation, Z)
    Wout = p.w2 if mask_scale is None else p.w2 * mask_scale
    Wout = np.broadcast_to(Wout, A.shape)
    f = np.sum(A * Wout, axis=1) + p.b2
    S = Wout * A1
    G = S @ p.W1
    return MemberCache(X, A, A1, A2, Wout, mask_scale, f, S, G)


def member_backward(p: MlpParams, c: MemberCache, dlogit: np.ndarray, dgrad: Optional[np.ndarray] = None) -> list:
    """Parameter gradients given dL/dlogit (B) and optionally dL/dinput-grad (B x D)."""
    dWout = dlogit[:, None] * c.A
    dZ = dlogit[:, None] * c.S
    if dgrad is not None:
        dS = dgrad @ p.W1.T
        dWout = dWout + dS * c.A1
        dZ = dZ + dS * c.Wout * c.A2
    dW1 = dZ.T @ c.X
    if dgrad is not None:
        dW1 = dW1 + c.S.T @ dgrad
    db1 = dZ.sum(axis=0)
    if c.mask_scale is not None:
        dWout = dWout * c.mask_scale
    dw2 = dWout.sum(axis=0)
    db2 = np.array(dlogit.sum())
    return [dW1, db1, dw2, db2]


def cos_penalty(G: np.ndarray, tangents: Optional[np.ndarray] = None, denom_epsilon: float = DENOM_EPSILON):
    """Ordered-pair sum of batch-mean squared cosines and its gradient.

    ``G`` is M x B x D. Returns ``(value, dG, pair_means)`` where
    ``pair_means[m, l]`` is the batch mean of cos^2 for that pair.
    """
    M, B, _ = G.shape
    P = G if tangents is None else np.einsum("mbd,bdk->mbk", G, tangents)
    N = np.sqrt(np.einsum("mbk,mbk->mb", P, P))
    dots = np.einsum("mbk,lbk->mlb", P, P)
    den = N[:, None, :] * N[None, :, :] + denom_epsilon
    C = dots**2 / den**2
    off = ~np.eye(M, dtype=bool)
    pair_means = C.mean(axis=2)
    value = float(pair_means[off].sum())
    # d C_ml / d P_m, doubled because (m, l) and (l, m) both appear
    coef_other = np.where(off[:, :, None], 2.0 * dots / den**2, 0.0)
    coef_self = np.where(off[:, :, None], 2.0 * dots**2 / den**3 * N[None, :, :], 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(N[..., None] > 0, P / N[..., None], 0.0)
    dP = 2.0 * (np.einsum("mlb,lbk->mbk", coef_other, P) - coef_self.sum(axis=1)[..., None] * unit) / B
    dG = dP if tangents is None else np.einsum("mbk,bdk->mbd", dP, tangents)
    return value, dG, pair_means


def _weights(y, sample_weight):
    return np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)


def nll_loss_and_grads(p: MlpParams, X, y, mask_scale=None, sample_weight=None):
    """Mean (optionally weighted) NLL of one member and its parameter gradients.

    Weights are scaled so that uniform weights reproduce the plain mean.
    """
    c = member_forward(p, X, mask_scale)
    w = _weights(y, sample_weight)
    B = X.shape[0]
    loss = float(np.sum(w * nll(c.f, y)) / B)
    dlogit = w * (expit(c.f) - y) / B
    return loss, member_backward(p, c, dlogit)


def lit_loss_and_grads(models, X, y, lam: float, denom_epsilon: float = DENOM_EPSILON,
                       tangents=None, mask_scales=None):
    """Closed-form joint LIT loss. Returns ``(total, nll_per_member, penalty, grads)``."""
    B = X.shape[0]
    mask_scales = mask_scales or [None] * len(models)
    caches = [member_forward(p, X, s) for p, s in zip(models, mask_scales)]
    nlls = [float(np.sum(nll(c.f, y)) / B) for c in caches]
    dlogits = [(expit(c.f) - y) / B for c in caches]
    penalty = 0.0
    dG = [None] * len(models)
    if len(models) > 1:
        penalty, dGs, _ = cos_penalty(np.stack([c.G for c in caches]), tangents, denom_epsilon)
        dG = [lam * g for g in dGs]
    grads = [member_backward(p, c, d, g) for p, c, d, g in zip(models, caches, dlogits, dG)]
    return sum(nlls) + lam * penalty, nlls, penalty, grads


def ncl_loss_and_grads(models, X, y, lam: float, mask_scales=None):
    B = X.shape[0]
    M = len(models)
    mask_scales = mask_scales or [None] * M
    caches = [member_forward(p, X, s) for p, s in zip(models, mask_scales)]
    P = np.stack([expit(c.f) for c in caches])
    dev = P - P.mean(axis=0)
    others = dev.sum(axis=0) - dev
    briers = [float(np.mean((P[m] - y) ** 2)) for m in range(M)]
    penalty = float(np.mean(np.sum(dev * others, axis=0)))
    # sum_m dev_m == 0 identically, so d(penalty)/dp_m = -2 dev_m per row
    dP = (2.0 * (P - y) - lam * 2.0 * dev) / B
    grads = [member_backward(p, c, dP[m] * P[m] * (1 - P[m])) for m, (p, c) in enumerate(zip(models, caches))]
    return sum(briers) + lam * penalty, briers, penalty, grads


def ace_loss_and_grads(models, X, y, lam: float, mask_scales=None):
    B = X.shape[0]
    M = len(models)
    mask_scales = mask_scales or [None] * M
    caches = [member_forward(p, X, s) for p, s in zip(models, mask_scales)]
    P = np.stack([expit(c.f) for c in caches])
    Pc = np.clip(P, PROB_CLAMP, 1 - PROB_CLAMP)
    inside = ((P > PROB_CLAMP) & (P < 1 - PROB_CLAMP)).astype(np.float64)
    logq, log1q = np.log(Pc), np.log1p(-Pc)
    nlls = [float(np.sum(nll(c.f, y)) / B) for c in caches]
    # pairwise cross-entropy H(p_l, p_m), summed over ordered pairs l != m
    xent = 0.0
    dPc = np.zeros_like(P)
    for m in range(M):
        for l in range(M):
            if l == m:
                continue
            xent += float(np.mean(-(Pc[l] * logq[m] + (1 - Pc[l]) * log1q[m])))
            dPc[m] += -(Pc[l] / Pc[m] - (1 - Pc[l]) / (1 - Pc[m]))
            dPc[l] += -(logq[m] - log1q[m])
    scale = lam / (M - 1)
    dP = -scale * dPc * inside / B
    grads = []
    for m, (p, c) in enumerate(zip(models, caches)):
        dlogit = (P[m] - y) / B + dP[m] * P[m] * (1 - P[m])
        grads.append(member_backward(p, c, dlogit))
    return sum(nlls) - scale * xent, nlls, xent, grads

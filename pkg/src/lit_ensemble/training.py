"""Adam and the ensemble trainers.

Seeding: member ``m`` of a run with seed ``s`` is initialised from stream
``(s, m, INIT)`` and draws dropout masks from ``(s, m, DROPOUT)``. Minibatch
order comes from ``(s, BATCHES)`` and is shared by every member, so a joint
run with lambda = 0 and independent restarts see identical batches and end at
identical parameters.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from .data import Dataset, Standardizer
from .models import MlpParams, forward, init_mlp, load_tensors, save_tensors
from .objectives import (
    DENOM_EPSILON,
    ace_loss_and_grads,
    lit_loss_and_grads,
    ncl_loss_and_grads,
    nll_loss_and_grads,
)

log = logging.getLogger(__name__)

__all__ = [
    "METHODS",
    "PENALIZED",
    "EnsembleConfig",
    "TrainedEnsemble",
    "AdamState",
    "TrainingDivergedError",
    "adam_step",
    "train_joint",
    "train_independent",
    "train_adaboost",
    "train_ensemble",
    "bootstrap_indices",
    "adaboost_alpha",
    "save_ensemble",
    "load_ensemble",
]

METHODS = ("RRs", "Bag", "Ada", "NCL", "ACE", "LIT")
PENALIZED = ("NCL", "ACE", "LIT")
STREAM_INIT, STREAM_DROPOUT, STREAM_BOOT = 0, 1, 2
STREAM_BATCHES = 7919
ADA_ALPHA_CAP = float(np.log(1e6))


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnsembleConfig:
    method: str = "LIT"
    size: int = 2
    lam: Optional[float] = None
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    dropout_rate: float = 0.0
    l2_penalty: float = 0.0
    hidden: int = 256
    activation: str = "relu"
    seed: int = 0
    penalty: str = "ambient"  # LIT only: "ambient" or "manifold"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.size < 1:
            raise ValueError("ensemble size must be >= 1")
        if self.method in PENALIZED:
            if self.lam is None or self.lam < 0:
                raise ValueError(f"{self.method} needs a non-negative lambda")
        elif self.lam is not None:
            raise ValueError(f"{self.method} does not take a lambda")
        if self.penalty not in ("ambient", "manifold"):
            raise ValueError("penalty must be 'ambient' or 'manifold'")
        if self.penalty == "manifold" and self.method != "LIT":
            raise ValueError("manifold penalty only applies to LIT")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("epochs, batch_size and hidden must be >= 1")


@dataclass(eq=False)
class TrainedEnsemble:
    members: list
    member_weights: np.ndarray
    config: EnsembleConfig
    training_log: list = field(default_factory=list)
    scaler: Optional[Standardizer] = None
    feature_names: list = field(default_factory=list)

    def __post_init__(self):
        w = np.asarray(self.member_weights, dtype=np.float64)
        if w.shape != (len(self.members),) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("member weights must be non-negative and sum to 1")
        self.member_weights = w

    def prefix(self, k: int) -> "TrainedEnsemble":
        """First ``k`` members with renormalised weights (independent or boosted runs)."""
        w = self.member_weights[:k]
        w = w / w.sum() if w.sum() > 0 else np.full(k, 1.0 / k)
        return TrainedEnsemble(self.members[:k], w, replace(self.config, size=k),
                               [r for r in self.training_log if r.get("member", 0) < k],
                               self.scaler, self.feature_names)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("non-finite gradient")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        new_p.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


# -- shared minibatch loop ------------------------------------------------------


def _member_rng(seed, m, stream):
    return np.random.default_rng([int(seed), int(m), stream])


def _init_member(cfg: EnsembleConfig, D: int, m: int) -> MlpParams:
    return init_mlp(D, cfg.hidden, cfg.activation, _member_rng(cfg.seed, m, STREAM_INIT))


def _mask_scale(rng, B, H, rate):
    if rate == 0:
        return None
    return (rng.random((B, H)) >= rate) / (1.0 - rate)


def _minibatch_loop(cfg: EnsembleConfig, members: list, member_ids: list, X, y, objective: Callable,
                    tangents=None, log_extra: Optional[dict] = None):
    """Run ``cfg.epochs`` of Adam on ``objective`` over shared minibatches.

    ``objective(members, Xb, yb, masks, Tb, idx)`` returns
    ``(loss, per_member, penalty, grads)``.
    """
    n = X.shape[0]
    batch_rng = np.random.default_rng([int(cfg.seed), STREAM_BATCHES])
    drop_rngs = [_member_rng(cfg.seed, m, STREAM_DROPOUT) for m in member_ids]
    states = [AdamState.zeros_like(p.arrays()) for p in members]
    history = []
    for epoch in range(cfg.epochs):
        perm = batch_rng.permutation(n)
        tot = pen = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            masks = [_mask_scale(r, len(idx), cfg.hidden, cfg.dropout_rate) for r in drop_rngs]
            Tb = None if tangents is None else tangents[idx]
            loss, _, penalty, grads = objective(members, X[idx], y[idx], masks, Tb, idx)
            if cfg.l2_penalty:
                for p, g in zip(members, grads):
                    loss += cfg.l2_penalty * (np.sum(p.W1**2) + np.sum(p.w2**2))
                    g[0] = g[0] + 2 * cfg.l2_penalty * p.W1
                    g[2] = g[2] + 2 * cfg.l2_penalty * p.w2
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            for k, (p, g) in enumerate(zip(members, grads)):
                arrays, states[k] = adam_step(p.arrays(), g, states[k], cfg.learning_rate,
                                              cfg.beta1, cfg.beta2, cfg.adam_eps)
                members[k] = p.replace_arrays(arrays)
            tot += loss
            pen += penalty
            batches += 1
        history.append({"epoch": epoch, "loss": tot / batches, "penalty": pen / batches, **(log_extra or {})})
    return members, history


# -- trainers -------------------------------------------------------------------


def train_joint(cfg: EnsembleConfig, train: Dataset, valid: Optional[Dataset] = None) -> TrainedEnsemble:
    """Optimise all members together on the LIT, NCL or ACE objective."""
    if cfg.method not in PENALIZED:
        raise ValueError(f"train_joint handles {PENALIZED}, not {cfg.method}")
    tangents = None
    if cfg.penalty == "manifold":
        if train.tangents is None:
            raise ValueError("manifold penalty needs a dataset with tangents")
        tangents = train.tangents
    lam = float(cfg.lam)
    if cfg.method == "LIT":
        def objective(ms, Xb, yb, masks, Tb, idx):
            return lit_loss_and_grads(ms, Xb, yb, lam, DENOM_EPSILON, Tb, masks)
    elif cfg.method == "NCL":
        if cfg.size < 2:
            raise ValueError("NCL needs at least two members")

        def objective(ms, Xb, yb, masks, Tb, idx):
            return ncl_loss_and_grads(ms, Xb, yb, lam, masks)
    else:
        if cfg.size < 2:
            raise ValueError("ACE needs at least two members")

        def objective(ms, Xb, yb, masks, Tb, idx):
            return ace_loss_and_grads(ms, Xb, yb, lam, masks)

    members = [_init_member(cfg, train.dim, m) for m in range(cfg.size)]
    members, history = _minibatch_loop(cfg, members, list(range(cfg.size)), train.X, train.y, objective, tangents)
    if valid is not None and valid.n:
        _log_valid(history, members, valid)
    return TrainedEnsemble(members, np.full(cfg.size, 1.0 / cfg.size), cfg, history,
                           train.scaler, train.feature_names)


def _nll_objective(sample_weight=None):
    def objective(ms, Xb, yb, masks, Tb, idx):
        w = None if sample_weight is None else sample_weight[idx]
        loss, grads = nll_loss_and_grads(ms[0], Xb, yb, masks[0], w)
        return loss, [loss], 0.0, [grads]
    return objective


def _log_valid(history, members, valid):
    if history:
        history[-1]["valid_acc"] = [float(np.mean((forward(m, valid.X) >= 0) == valid.y)) for m in members]


def bootstrap_indices(n: int, seed, member: int) -> np.ndarray:
    return _member_rng(seed, member, STREAM_BOOT).integers(0, n, size=n)


def train_independent(cfg: EnsembleConfig, train: Dataset, valid: Optional[Dataset] = None,
                      resample: Optional[Callable] = None) -> TrainedEnsemble:
    """Random restarts (full data, distinct seeds) or bagging (bootstrap per member).

    ``resample(n, seed, member)`` overrides the bootstrap draw.
    """
    if cfg.method not in ("RRs", "Bag"):
        raise ValueError(f"train_independent handles RRs and Bag, not {cfg.method}")
    resample = resample or bootstrap_indices
    members, history = [], []
    for m in range(cfg.size):
        if cfg.method == "Bag":
            idx = resample(train.n, cfg.seed, m)
            X, y = train.X[idx], train.y[idx]
        else:
            X, y = train.X, train.y
        p = _init_member(cfg, train.dim, m)
        (p,), h = _minibatch_loop(cfg, [p], [m], X, y, _nll_objective(), log_extra={"member": m})
        members.append(p)
        history.extend(h)
    if valid is not None and valid.n:
        _log_valid(history, members, valid)
    return TrainedEnsemble(members, np.full(cfg.size, 1.0 / cfg.size), cfg, history,
                           train.scaler, train.feature_names)


def adaboost_alpha(err: float) -> float:
    """Member weight ``ln((1 - err) / err)``; 0 when err >= 0.5, capped when err = 0."""
    if err >= 0.5:
        return 0.0
    if err <= 0:
        return ADA_ALPHA_CAP
    return min(float(np.log((1 - err) / err)), ADA_ALPHA_CAP)


def train_adaboost(cfg: EnsembleConfig, train: Dataset, valid: Optional[Dataset] = None) -> TrainedEnsemble:
    """Two-class AdaBoost with example weights folded into each member's NLL.

    Stops early after a round with zero weighted error, so the ensemble may
    have fewer than ``cfg.size`` members.
    """
    if cfg.method != "Ada":
        raise ValueError("train_adaboost needs method 'Ada'")
    n = train.n
    w = np.full(n, 1.0 / n)
    members, alphas, history = [], [], []
    for t in range(cfg.size):
        p = _init_member(cfg, train.dim, t)
        (p,), h = _minibatch_loop(cfg, [p], [t], train.X, train.y, _nll_objective(w * n),
                                  log_extra={"member": t})
        wrong = (forward(p, train.X) >= 0).astype(float) != train.y
        err = float(np.sum(w[wrong]))
        alpha = adaboost_alpha(err)
        h[-1].update(weighted_error=err, alpha=alpha)
        members.append(p)
        alphas.append(alpha)
        history.extend(h)
        if err <= 0:
            h[-1]["stopped_early"] = True
            break
        if err >= 0.5:
            w = np.full(n, 1.0 / n)
        else:
            w = w * np.exp(alpha * wrong)
            w = w / w.sum()
        h[-1]["example_weight_sum"] = float(w.sum())
    a = np.asarray(alphas)
    weights = a / a.sum() if a.sum() > 0 else np.full(len(a), 1.0 / len(a))
    if valid is not None and valid.n:
        _log_valid(history, members, valid)
    return TrainedEnsemble(members, weights, replace(cfg, size=len(members)), history,
                           train.scaler, train.feature_names)


def train_ensemble(cfg: EnsembleConfig, train: Dataset, valid: Optional[Dataset] = None) -> TrainedEnsemble:
    if cfg.method in PENALIZED:
        return train_joint(cfg, train, valid)
    if cfg.method == "Ada":
        return train_adaboost(cfg, train, valid)
    return train_independent(cfg, train, valid)


# -- persistence ------------------------------------------------------------------


def save_ensemble(e: TrainedEnsemble, path) -> None:
    tensors = {"member_weights": e.member_weights}
    for i, p in enumerate(e.members):
        tensors.update({f"m{i}.W1": p.W1, f"m{i}.b1": p.b1, f"m{i}.w2": p.w2, f"m{i}.b2": np.array(p.b2)})
    if e.scaler is not None:
        tensors["scaler.mean"] = e.scaler.mean
        tensors["scaler.scale"] = e.scaler.scale
        tensors["scaler.keep"] = e.scaler.keep.astype(np.float64)
    meta = {"config": " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}"
                               for k, v in asdict(e.config).items())}
    if e.feature_names:
        meta["features"] = ",".join(e.feature_names)
    save_tensors(path, tensors, meta)


def _parse_cfg(text: str) -> EnsembleConfig:
    kwargs = {}
    types = {f.name: type(f.default) for f in fields(EnsembleConfig)}
    for item in text.split():
        k, _, v = item.partition("=")
        if k == "lam":
            kwargs[k] = None if v == "None" else float(v)
        elif types.get(k) is int:
            kwargs[k] = int(v)
        elif types.get(k) is float:
            kwargs[k] = float(v)
        else:
            kwargs[k] = v
    return EnsembleConfig(**kwargs)


def load_ensemble(path) -> TrainedEnsemble:
    tensors, meta = load_tensors(path)
    cfg = _parse_cfg(meta.get("config", ""))
    members = []
    i = 0
    while f"m{i}.W1" in tensors:
        members.append(MlpParams(tensors[f"m{i}.W1"], tensors[f"m{i}.b1"], tensors[f"m{i}.w2"],
                                 float(tensors[f"m{i}.b2"]), cfg.activation))
        i += 1
    scaler = None
    if "scaler.mean" in tensors:
        scaler = Standardizer(tensors["scaler.mean"], tensors["scaler.scale"], tensors["scaler.keep"] > 0.5)
    names = meta["features"].split(",") if meta.get("features") else []
    return TrainedEnsemble(members, tensors["member_weights"], replace(cfg, size=max(len(members), 1)),
                           [], scaler, names)

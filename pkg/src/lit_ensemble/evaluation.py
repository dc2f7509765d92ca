"""Ensemble prediction, AUC/accuracy and per-run metric records."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .diversity import (
    IndepOracleConfig,
    UndefinedMetricError,
    ensemble_cos2,
    error_correlation_rho,
    indep_err_oracle,
    kappa_average,
    q_average,
)
from .models import predict_proba

__all__ = [
    "ensemble_predict",
    "member_probabilities",
    "auc",
    "accuracy",
    "MetricsRecord",
    "build_report",
    "METRIC_FIELDS",
]

METRIC_FIELDS = ("auc", "accuracy", "rho_av", "q_av", "kappa", "cos2", "indep_err")


def member_probabilities(ensemble, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.stack([predict_proba(m, X) for m in ensemble.members])


def ensemble_predict(ensemble, X) -> np.ndarray:
    """Weighted mean of member probabilities (uniform unless boosted)."""
    w = np.asarray(ensemble.member_weights, dtype=np.float64)
    return w @ member_probabilities(ensemble, X)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of rows where ``score >= threshold`` matches the label."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    return float(np.mean((scores >= threshold).astype(int) == labels))


@dataclass
class MetricsRecord:
    auc: Optional[float] = None
    accuracy: Optional[float] = None
    rho_av: Optional[float] = None
    q_av: Optional[float] = None
    kappa: Optional[float] = None
    cos2: Optional[float] = None
    indep_err: Optional[float] = None
    meta: dict = field(default_factory=dict)
    undefined: dict = field(default_factory=dict)  # field -> reason

    def to_dict(self) -> dict:
        out = dict(self.meta)
        for f in METRIC_FIELDS:
            out[f] = getattr(self, f)
        out["undefined"] = dict(self.undefined)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        d = dict(d)
        metrics = {f: d.pop(f, None) for f in METRIC_FIELDS}
        undefined = d.pop("undefined", {}) or {}
        return cls(**metrics, meta=d, undefined=undefined)


def build_report(ensemble, eval_set, meta: Optional[dict] = None, tangents=None,
                 oracle: Optional[IndepOracleConfig] = None) -> MetricsRecord:
    """Compute every metric of ``ensemble`` on ``eval_set``.

    Pairwise metrics are averaged over unordered member pairs. Anything
    undefined stays ``None`` and its reason goes to ``undefined``.
    ``oracle`` additionally estimates the projected-ascent independence error
    (mean over ordered pairs), which is slower.
    """
    if eval_set.n == 0:
        raise ValueError("empty evaluation set")
    rec = MetricsRecord(meta=dict(meta or {}))
    probs = member_probabilities(ensemble, eval_set.X)
    scores = np.asarray(ensemble.member_weights, dtype=np.float64) @ probs
    y = eval_set.y.astype(int)
    try:
        rec.auc = auc(scores, y)
    except UndefinedMetricError as exc:
        rec.undefined["auc"] = str(exc)
    rec.accuracy = accuracy(scores, y)
    preds = (probs >= 0.5).astype(int)
    for name, avg in (("rho_av", error_correlation_rho(preds, y)),
                      ("q_av", q_average(preds, y)),
                      ("kappa", kappa_average(preds, y)),
                      ("cos2", ensemble_cos2(ensemble.members, eval_set.X, tangents))):
        if avg.defined:
            setattr(rec, name, avg.value)
            if avg.excluded:
                rec.meta[f"{name}_excluded_pairs"] = avg.excluded
        else:
            rec.undefined[name] = avg.reason
    members = ensemble.members
    if oracle is not None and len(members) > 1:
        vals = [indep_err_oracle(members[i], members[j], eval_set.X, oracle)
                for i in range(len(members)) for j in range(len(members)) if i != j]
        rec.indep_err = float(np.mean(vals))
    elif oracle is None:
        rec.undefined["indep_err"] = "not requested"
    else:
        rec.undefined["indep_err"] = "fewer than two members"
    for f in METRIC_FIELDS:
        v = getattr(rec, f)
        if v is not None and not math.isfinite(v):
            setattr(rec, f, None)
            rec.undefined[f] = "non-finite"
    return rec

"""Cross-validated hyperparameter grid over methods, ensemble sizes and lambdas.

Every run is keyed by ``(method, size, lambda, restart)`` and written as one
JSON line, so a results file can be resumed or merged in any order. Within a
restart all methods share one train/valid/test split (seeded by the restart).

Independent methods (RRs, Bag, Ada) are trained once per restart at the
largest requested size; smaller ensembles are prefixes of it. Members of
those methods never interact, so a prefix is exactly what training at the
smaller size would produce.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import Dataset, SplitSpec, split
from .evaluation import build_report
from .training import METHODS, PENALIZED, EnsembleConfig, train_ensemble

log = logging.getLogger(__name__)

__all__ = [
    "GridSpec",
    "GridResult",
    "Selection",
    "lambda_grid",
    "run_key",
    "grid_search",
    "select_configs",
    "read_records",
    "write_summary_csv",
    "write_pivot_csv",
]

RECORD_FIELDS = ("method", "size", "lambda", "restart", "split", "auc", "acc", "rho_av", "q_av",
                 "kappa", "cos2", "valid_auc", "valid_acc", "wall_time_s", "status")
SUMMARY_METRICS = ("auc", "acc", "rho_av", "q_av", "kappa", "cos2")


def lambda_grid(lo: float = 1e-4, hi: float = 1e1, n: int = 16) -> list:
    """``n`` log-spaced values from ``lo`` to ``hi`` inclusive."""
    if n < 1 or lo <= 0 or hi < lo:
        raise ValueError("need n >= 1 and 0 < lo <= hi")
    if n == 1:
        return [float(lo)]
    vals = np.logspace(math.log10(lo), math.log10(hi), n)
    vals[0], vals[-1] = lo, hi
    return [float(v) for v in vals]


def run_key(method: str, size: int, lam: Optional[float], restart: int) -> str:
    return f"{method}|{size}|{'-' if lam is None else repr(float(lam))}|{restart}"


@dataclass(frozen=True)
class GridSpec:
    methods: Sequence[str] = METHODS
    sizes: Sequence[int] = (2, 3, 5, 8, 13)
    lambdas: Sequence[float] = field(default_factory=lambda: tuple(lambda_grid()))
    restarts: int = 10
    split_kind: str = "random"
    base: EnsembleConfig = EnsembleConfig(method="RRs")  # epochs, hidden, dropout, ...

    def __post_init__(self):
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if not self.sizes or min(self.sizes) < 1:
            raise ValueError("sizes must be non-empty and >= 1")
        if any(m in PENALIZED for m in self.methods) and not self.lambdas:
            raise ValueError("penalized methods need at least one lambda")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    def keys(self) -> list:
        out = []
        for r in range(self.restarts):
            for m in self.methods:
                for s in self.sizes:
                    for lam in (self.lambdas if m in PENALIZED else [None]):
                        out.append(run_key(m, s, lam, r))
        return out


@dataclass
class Selection:
    method: str
    size: int
    lam: Optional[float]
    valid_auc: float
    runs: int
    failed: int
    test_mean: dict
    test_std: dict


@dataclass
class GridResult:
    records: list
    selections: dict  # method -> Selection
    executed: list  # keys run in this call
    failed: list  # keys whose run failed


def read_records(path) -> list:
    if not path or not os.path.exists(path):
        return []
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _record(cfg: EnsembleConfig, restart: int, split_kind: str, ens, valid: Dataset, test: Dataset,
            wall: float) -> dict:
    rec = {"method": cfg.method, "size": cfg.size, "lambda": cfg.lam, "restart": restart,
           "split": split_kind, "key": run_key(cfg.method, cfg.size, cfg.lam, restart)}
    manifold = cfg.penalty == "manifold"
    rt = build_report(ens, test, tangents=test.tangents if manifold else None)
    rv = build_report(ens, valid, tangents=valid.tangents if manifold else None)
    rec.update(auc=rt.auc, acc=rt.accuracy, rho_av=rt.rho_av, q_av=rt.q_av, kappa=rt.kappa, cos2=rt.cos2,
               valid_auc=rv.auc, valid_acc=rv.accuracy, wall_time_s=round(wall, 4), status="ok",
               members=len(ens.members), undefined=rt.undefined)
    return rec


def _failed(method, size, lam, restart, split_kind, exc) -> dict:
    rec = {f: None for f in RECORD_FIELDS}
    rec.update(method=method, size=size, restart=restart, split=split_kind, status="failed",
               error=f"{type(exc).__name__}: {exc}", key=run_key(method, size, lam, restart))
    rec["lambda"] = lam
    return rec


def grid_search(dataset: Dataset, spec: GridSpec, out_path=None, progress=None) -> GridResult:
    """Train and score every missing run of ``spec`` on ``dataset``.

    Records already present in ``out_path`` with status ``ok`` are kept and
    not re-run; failed ones are retried. New records are appended as they
    finish.
    """
    existing = read_records(out_path)
    done = {r["key"]: r for r in existing if r.get("status") == "ok"}
    records = list(done.values())
    executed, failed = [], []
    fh = open(out_path, "a") if out_path else None

    def emit(rec):
        records.append(rec)
        executed.append(rec["key"])
        if rec["status"] != "ok":
            failed.append(rec["key"])
        if fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
        if progress:
            progress(rec)

    try:
        for r in range(spec.restarts):
            todo = [k for k in spec.keys() if k.endswith(f"|{r}") and k not in done]
            if not todo:
                continue
            train, valid, test = split(dataset, SplitSpec(spec.split_kind, seed=r))
            for method in spec.methods:
                base = replace(spec.base, method=method, seed=r, size=1,
                               lam=0.0 if method in PENALIZED else None,
                               penalty=spec.base.penalty if method == "LIT" else "ambient")
                if method in PENALIZED:
                    for size in spec.sizes:
                        for lam in spec.lambdas:
                            if run_key(method, size, lam, r) not in todo:
                                continue
                            cfg = replace(base, size=size, lam=float(lam))
                            try:
                                t0 = time.perf_counter()
                                ens = train_ensemble(cfg, train, valid)
                                emit(_record(cfg, r, spec.split_kind, ens, valid, test, time.perf_counter() - t0))
                            except Exception as exc:  # recorded, excluded from selection
                                log.warning("run %s failed: %s", run_key(method, size, lam, r), exc)
                                emit(_failed(method, size, lam, r, spec.split_kind, exc))
                else:
                    need = [s for s in spec.sizes if run_key(method, s, None, r) in todo]
                    if not need:
                        continue
                    top = max(need)
                    try:
                        t0 = time.perf_counter()
                        full = train_ensemble(replace(base, size=top), train, valid)
                        wall = time.perf_counter() - t0
                    except Exception as exc:
                        log.warning("%s restart %d failed: %s", method, r, exc)
                        for s in need:
                            emit(_failed(method, s, None, r, spec.split_kind, exc))
                        continue
                    for s in sorted(need):
                        ens = full.prefix(min(s, len(full.members)))
                        emit(_record(replace(base, size=s), r, spec.split_kind, ens, valid, test,
                                     wall * min(s, len(full.members)) / len(full.members)))
    finally:
        if fh:
            fh.close()
    return GridResult(records, select_configs(records), executed, failed)


def _mean_std(vals):
    vals = [v for v in vals if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def select_configs(records: Iterable[dict]) -> dict:
    """Per method, pick the (size, lambda) with the best mean validation AUC.

    Ties go to the smaller ensemble, then the smaller lambda.
    """
    groups: dict = {}
    fails: dict = {}
    for r in records:
        key = (r["method"], r["size"], r["lambda"])
        if r.get("status") != "ok":
            fails[key] = fails.get(key, 0) + 1
            continue
        groups.setdefault(key, []).append(r)
    best: dict = {}
    for (method, size, lam), runs in groups.items():
        vauc = [r["valid_auc"] for r in runs if r["valid_auc"] is not None]
        if not vauc:
            continue
        score = float(np.mean(vauc))
        cand = (score, -size, -(lam or 0.0))
        if method not in best or cand > best[method][0]:
            best[method] = (cand, size, lam, runs)
    out = {}
    for method, (cand, size, lam, runs) in best.items():
        mean, std = {}, {}
        for m in SUMMARY_METRICS:
            mean[m], std[m] = _mean_std([r.get(m) for r in runs])
        out[method] = Selection(method, size, lam, cand[0], len(runs), fails.get((method, size, lam), 0), mean, std)
    return out


def write_summary_csv(selections: dict, path) -> None:
    cols = ["method", "size", "lambda", "valid_auc", "runs", "failed"]
    for m in SUMMARY_METRICS:
        cols += [f"{m}_mean", f"{m}_std"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for method in METHODS:
            s = selections.get(method)
            if s is None:
                continue
            row = [s.method, s.size, "" if s.lam is None else repr(s.lam), repr(s.valid_auc), s.runs, s.failed]
            for m in SUMMARY_METRICS:
                row += ["" if s.test_mean[m] is None else repr(s.test_mean[m]),
                        "" if s.test_std[m] is None else repr(s.test_std[m])]
            w.writerow(row)


def write_pivot_csv(per_dataset: dict, path, metrics=("auc", "rho_av", "cos2")) -> None:
    """Methods as rows, ``dataset/metric_{mean,std}`` as columns.

    ``per_dataset`` maps a dataset label to a ``select_configs`` result.
    """
    names = list(per_dataset)
    cols = ["method"] + [f"{d}/{m}_{s}" for d in names for m in metrics for s in ("mean", "std")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for method in METHODS:
            if not any(method in per_dataset[d] for d in names):
                continue
            row = [method]
            for d in names:
                sel = per_dataset[d].get(method)
                for m in metrics:
                    for stat in ("test_mean", "test_std"):
                        v = None if sel is None else getattr(sel, stat)[m]
                        row.append("" if v is None else repr(v))
            w.writerow(row)

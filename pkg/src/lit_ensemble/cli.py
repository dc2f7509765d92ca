"""Command-line entry point: ``lit-ensemble <command> ...``.

Exit status is 0 on success, 2 for configuration or usage errors and 3 when
a run fails (I/O, divergence, failed grid cells).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np
from scipy.special import expit

from .config import ConfigError, load_config
from .data import DataError, apply_scaler, attach_chart, gen_2d_gaps, gen_manifold_3d, load_csv, split, write_csv
from .diversity import IndepOracleConfig
from .evaluation import build_report
from .grid import grid_search, write_pivot_csv, write_summary_csv
from .models import forward, input_gradient
from .training import TrainingDivergedError, load_ensemble, save_ensemble, train_ensemble

log = logging.getLogger("lit_ensemble")

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3


def _ensure_dir(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def _load_run(args, out_is_dir=True):
    """Config with CLI overrides; ``--out`` replaces the run directory only for train and grid."""
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, ensemble=replace(cfg.ensemble, seed=args.seed))
    if out_is_dir and args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def cmd_gen_data(args) -> int:
    if args.variant == "manifold3d":
        ds = gen_manifold_3d(args.n, args.seed, args.embedding_seed)
        extra = {"u1": ds.chart[:, 0], "u2": ds.chart[:, 1]}
    else:
        ds = gen_2d_gaps(args.variant, args.n, args.noise, args.seed)
        extra = None
    _ensure_dir(args.out)
    write_csv(ds, args.out, "label", extra)
    print(f"wrote {ds.n} rows to {args.out}")
    return EXIT_OK


def _write_log(history, path):
    keys = []
    for rec in history:
        keys += [k for k in rec if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for rec in history:
            w.writerow({k: json.dumps(v) if isinstance(v, list) else v for k, v in rec.items()})


def _tangents_for(ens, part):
    return part.tangents if ens.config.penalty == "manifold" else None


def cmd_train(args) -> int:
    cfg = _load_run(args)
    ds = cfg.dataset.load()
    train, valid, test = split(ds, cfg.split)
    ens = train_ensemble(cfg.ensemble, train, valid)
    os.makedirs(cfg.output_dir, exist_ok=True)
    save_ensemble(ens, os.path.join(cfg.output_dir, "ensemble.txt"))
    _write_log(ens.training_log, os.path.join(cfg.output_dir, "training_log.csv"))
    meta = {"method": ens.config.method, "size": len(ens.members), "lambda": ens.config.lam,
            "split": cfg.split.kind, "restart": cfg.split.seed}
    with open(os.path.join(cfg.output_dir, "metrics.jsonl"), "w") as fh:
        for name, part in (("valid", valid), ("test", test)):
            rec = build_report(ens, part, {**meta, "partition": name}, _tangents_for(ens, part))
            fh.write(rec.to_json() + "\n")
            print(f"{name}: auc={rec.auc} acc={rec.accuracy} cos2={rec.cos2}")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _load_run(args)
    if cfg.grid is None:
        raise ConfigError(f"{cfg.source}: grid: section required for the grid command")
    ds = cfg.dataset.load()
    os.makedirs(cfg.output_dir, exist_ok=True)
    res = grid_search(ds, cfg.grid, os.path.join(cfg.output_dir, "results.jsonl"),
                      progress=lambda r: log.info("%s %s auc=%s", r["key"], r["status"], r.get("auc")))
    write_summary_csv(res.selections, os.path.join(cfg.output_dir, "summary.csv"))
    write_pivot_csv({ds.name or "dataset": res.selections}, os.path.join(cfg.output_dir, "table.csv"))
    print(f"executed {len(res.executed)} runs, {len(res.records)} records total")
    for s in res.selections.values():
        print(f"{s.method}: size={s.size} lambda={s.lam} test auc={s.test_mean['auc']:.4f}"
              f"+-{s.test_std['auc']:.4f} cos2={s.test_mean['cos2']}")
    if res.failed:
        print(f"{len(res.failed)} runs failed:", file=sys.stderr)
        for k in res.failed:
            print(f"  {k}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def _model_path(args, cfg):
    if args.model:
        return args.model
    if cfg is None:
        raise ConfigError("give --model or --config")
    return os.path.join(cfg.output_dir, "ensemble.txt")


def _eval_data(args, ens, cfg):
    """Evaluation rows in the model's input space: a CSV or a config's test split."""
    if args.data:
        ds = load_csv(args.data, args.label_column)
        if args.chart_columns:
            ds = attach_chart(ds, args.chart_columns.split(","), args.embedding_seed)
        if ens.scaler is not None:
            ds = apply_scaler(ds, ens.scaler)
        return ds
    if cfg is None:
        raise ConfigError("give --data or --config")
    return split(cfg.dataset.load(), cfg.split)[2]


def cmd_eval(args) -> int:
    cfg = _load_run(args, out_is_dir=False) if args.config else None
    ens = load_ensemble(_model_path(args, cfg))
    part = _eval_data(args, ens, cfg)
    oracle = IndepOracleConfig(args.epsilon) if args.oracle else None
    rec = build_report(ens, part, {"method": ens.config.method, "size": len(ens.members),
                                   "lambda": ens.config.lam}, _tangents_for(ens, part), oracle)
    line = rec.to_json()
    if args.out:
        _ensure_dir(args.out)
        with open(args.out, "a") as fh:
            fh.write(line + "\n")
    print(line)
    return EXIT_OK


def boundary_grid(ens, bounds, resolution):
    """Member logits and ensemble probability on a uniform grid (raw input units)."""
    if ens.members[0].dim != 2:
        raise DataError(f"boundary export needs a 2D model, got D={ens.members[0].dim}")
    x1 = np.linspace(bounds[0], bounds[1], resolution)
    x2 = np.linspace(bounds[2], bounds[3], resolution)
    G1, G2 = np.meshgrid(x1, x2)
    P = np.column_stack([G1.ravel(), G2.ravel()])
    Z = ens.scaler.transform(P) if ens.scaler is not None else P
    logits = np.stack([forward(m, Z) for m in ens.members])
    prob = np.asarray(ens.member_weights) @ expit(logits)
    return P, logits, prob, (x1, x2)


def cmd_export_boundary(args) -> int:
    cfg = _load_run(args, out_is_dir=False) if args.config else None
    ens = load_ensemble(_model_path(args, cfg))
    P, logits, prob, (x1, x2) = boundary_grid(ens, args.bounds, args.resolution)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(_model_path(args, cfg))), "boundary.csv")
    _ensure_dir(out)
    M = len(ens.members)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2"] + [f"logit_{m}" for m in range(M)] + ["ensemble_prob"])
        for i in range(P.shape[0]):
            w.writerow([repr(float(P[i, 0])), repr(float(P[i, 1]))] + [repr(float(v)) for v in logits[:, i]] + [repr(float(prob[i]))])
    if not args.no_plot:
        from .plotting import plot_boundaries
        r = args.resolution
        plot_boundaries(x1, x2, logits.reshape(M, r, r), prob.reshape(r, r), os.path.splitext(out)[0] + ".png",
                        title=f"{ens.config.method} (M={M})")
    print(f"wrote {P.shape[0]} grid rows to {out}")
    return EXIT_OK


def cmd_export_gradients(args) -> int:
    cfg = _load_run(args, out_is_dir=False) if args.config else None
    ens = load_ensemble(_model_path(args, cfg))
    part = _eval_data(args, ens, cfg)
    grads = np.stack([input_gradient(m, part.X) for m in ens.members])  # M x n x D
    mean = grads.mean(axis=0)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(_model_path(args, cfg))), "gradients.csv")
    _ensure_dir(out)
    names = part.feature_names
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["example", "member", "feature", "gradient", "mean_gradient"])
        for i in range(part.n):
            for m in range(len(ens.members)):
                for j, name in enumerate(names):
                    w.writerow([i, m, name, repr(float(grads[m, i, j])), repr(float(mean[i, j]))])
    if not args.no_plot:
        from .plotting import plot_gradient_distributions
        plot_gradient_distributions(grads, names, os.path.splitext(out)[0] + ".png")
    print(f"wrote {grads.size} gradient rows to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lit-ensemble", description="Train and evaluate locally independent ensembles.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="TOML run config")
        p.add_argument("--seed", type=int, default=None, help="override the ensemble seed")
        p.add_argument("--out", default=None, help="output path or directory")

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    p.add_argument("--variant", required=True, choices=["D1", "D2", "D3", "manifold3d"])
    p.add_argument("-n", type=int, default=400)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embedding-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one ensemble from a config")
    common(p, True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="run or resume a hyperparameter grid")
    common(p, True)
    p.set_defaults(func=cmd_grid)

    def data_args(p):
        p.add_argument("--model", help="serialized ensemble (default: <output_dir>/ensemble.txt)")
        p.add_argument("--data", help="CSV to evaluate instead of the config's test split")
        p.add_argument("--label-column", default="label")
        p.add_argument("--chart-columns", default=None, help="comma-separated chart columns (manifold CSVs)")
        p.add_argument("--embedding-seed", type=int, default=0)

    p = sub.add_parser("eval", help="metrics of a trained ensemble")
    common(p)
    data_args(p)
    p.add_argument("--oracle", action="store_true", help="also estimate the projected-ascent independence error")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-boundary", help="member logits on a 2D grid (CSV + PNG)")
    common(p)
    p.add_argument("--model")
    p.add_argument("--bounds", type=float, nargs=4, default=[-2.0, 2.0, -2.0, 2.0],
                   metavar=("X1MIN", "X1MAX", "X2MIN", "X2MAX"))
    p.add_argument("--resolution", type=int, default=100)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_export_boundary)

    p = sub.add_parser("export-gradients", help="per-example input gradients (CSV + PNG)")
    common(p)
    data_args(p)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_export_gradients)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TrainingDivergedError, OSError, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())

"""Run configuration files (TOML with dotted sections).

A config names a dataset, a split, an ensemble and an output directory, and
optionally a grid. Unknown keys are rejected with the offending line, because
a misspelt ``lambda`` or ``seed`` would otherwise silently fall back to a
default. Example::

    output_dir = "runs/d1-lit"

    [dataset]
    synthetic = "D1"
    n = 400
    seed = 7

    [split]
    kind = "random"
    seed = 0

    [ensemble]
    method = "LIT"
    size = 2
    lambda = 0.1
    hidden = 64
    activation = "softplus"
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, fields
from typing import Optional

from .data import Dataset, SplitSpec, attach_chart, gen_2d_gaps, gen_manifold_3d, load_csv, load_named
from .grid import GridSpec, lambda_grid
from .training import METHODS, PENALIZED, EnsembleConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = ["ConfigError", "DatasetRef", "RunConfig", "parse_config", "load_config"]

SYNTHETIC = ("D1", "D2", "D3", "manifold3d")
_DATASET_KEYS = {"synthetic", "n", "noise", "seed", "embedding_seed", "path", "label_column",
                 "categorical_columns", "positive_label", "chart_columns", "name", "manifest"}
_SPLIT_KEYS = {"kind", "seed", "train_fraction", "valid_fraction_of_train", "standardize"}
_ENSEMBLE_KEYS = {f.name for f in fields(EnsembleConfig)} - {"lam"} | {"lambda"}
_GRID_KEYS = {"methods", "sizes", "lambdas", "lambda_min", "lambda_max", "lambda_points", "restarts",
              "split_kind"}
_SECTIONS = {"dataset": _DATASET_KEYS, "split": _SPLIT_KEYS, "ensemble": _ENSEMBLE_KEYS, "grid": _GRID_KEYS}


class ConfigError(ValueError):
    """Invalid config; the message carries ``path:line`` when known."""


@dataclass(frozen=True)
class DatasetRef:
    synthetic: Optional[str] = None
    n: int = 400
    noise: float = 0.2
    seed: int = 0
    embedding_seed: int = 0
    path: Optional[str] = None
    label_column: str = "label"
    categorical_columns: tuple = ()
    positive_label: Optional[str] = None
    chart_columns: tuple = ()
    name: Optional[str] = None
    manifest: Optional[str] = None

    def load(self) -> Dataset:
        if self.synthetic == "manifold3d":
            return gen_manifold_3d(self.n, self.seed, self.embedding_seed)
        if self.synthetic is not None:
            return gen_2d_gaps(self.synthetic, self.n, self.noise, self.seed)
        if self.manifest is not None:
            return load_named(self.name, self.manifest)
        ds = load_csv(self.path, self.label_column, self.categorical_columns, self.positive_label)
        if self.chart_columns:
            ds = attach_chart(ds, self.chart_columns, self.embedding_seed)
        return ds


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetRef
    split: SplitSpec
    ensemble: EnsembleConfig
    output_dir: str
    grid: Optional[GridSpec] = None
    source: str = "<string>"


def _line_of(text: str, section: Optional[str], key: str) -> Optional[int]:
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.match(r"\[([^\]]+)\]", stripped)
        if m:
            current = m.group(1).strip()
            continue
        head = stripped.split("=", 1)[0].strip()
        if "=" in stripped and current == section and head == key:
            return no
        if section is not None and current is None and head == f"{section}.{key}":
            return no
    return None


def _err(source, text, section, key, msg) -> ConfigError:
    line = _line_of(text, section, key)
    where = f"{source}:{line}" if line else source
    label = f"{section}.{key}" if section else key
    return ConfigError(f"{where}: {label}: {msg}")


def _resolve(base_dir: str, p: str) -> str:
    return p if os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))


def parse_config(text: str, source: str = "<string>", base_dir: str = ".") -> RunConfig:
    """Parse and validate config text; relative paths resolve against ``base_dir``."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None

    for key, val in raw.items():
        if key == "output_dir":
            continue
        if key not in _SECTIONS:
            raise _err(source, text, None, key, "unknown key")
        if not isinstance(val, dict):
            raise _err(source, text, None, key, "expected a section")
        for sub in val:
            if sub not in _SECTIONS[key]:
                raise _err(source, text, key, sub, "unknown key")

    out = raw.get("output_dir")
    if not isinstance(out, str) or not out:
        raise _err(source, text, None, "output_dir", "required string")

    def bad(section, key, msg):
        return _err(source, text, section, key, msg)

    # dataset
    d = dict(raw.get("dataset", {}))
    sources = [k for k in ("synthetic", "path", "name") if k in d]
    if len(sources) != 1:
        raise bad("dataset", sources[1] if len(sources) > 1 else "synthetic",
                  "give exactly one of synthetic, path or name")
    if "synthetic" in d and d["synthetic"] not in SYNTHETIC:
        raise bad("dataset", "synthetic", f"expected one of {SYNTHETIC}")
    if "name" in d:
        if "manifest" not in d:
            raise bad("dataset", "name", "a named dataset needs a manifest")
        d["manifest"] = _resolve(base_dir, d["manifest"])
        if not os.path.exists(d["manifest"]):
            raise bad("dataset", "manifest", f"file not found: {d['manifest']}")
    if "path" in d:
        d["path"] = _resolve(base_dir, d["path"])
        if not os.path.exists(d["path"]):
            raise bad("dataset", "path", f"file not found: {d['path']}")
    for key in ("categorical_columns", "chart_columns"):
        if key in d:
            d[key] = tuple(d[key])
    try:
        dataset = DatasetRef(**d)
    except TypeError as exc:
        raise ConfigError(f"{source}: dataset: {exc}") from None

    # split
    try:
        split = SplitSpec(**raw.get("split", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: split: {exc}") from None

    # ensemble
    e = dict(raw.get("ensemble", {}))
    method = e.get("method", EnsembleConfig.method)
    if method not in METHODS:
        raise bad("ensemble", "method", f"expected one of {METHODS}")
    if "lambda" in e:
        if method not in PENALIZED:
            raise bad("ensemble", "lambda", f"{method} does not take a lambda")
        e["lam"] = float(e.pop("lambda"))
    elif method in PENALIZED and "grid" not in raw:
        raise bad("ensemble", "method", f"{method} needs a lambda")
    elif method in PENALIZED:
        e["lam"] = 0.0  # placeholder, the grid supplies lambdas
    try:
        ensemble = EnsembleConfig(**e)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: ensemble: {exc}") from None

    # grid
    grid = None
    if "grid" in raw:
        g = dict(raw["grid"])
        if "lambdas" in g and {"lambda_min", "lambda_max", "lambda_points"} & set(g):
            raise bad("grid", "lambdas", "give either lambdas or lambda_min/max/points")
        lambdas = g.pop("lambdas", None)
        lo, hi, pts = g.pop("lambda_min", 1e-4), g.pop("lambda_max", 1e1), g.pop("lambda_points", 16)
        try:
            lambdas = tuple(float(v) for v in lambdas) if lambdas is not None else tuple(lambda_grid(lo, hi, pts))
            if "methods" in g:
                g["methods"] = tuple(g["methods"])
            if "sizes" in g:
                g["sizes"] = tuple(int(s) for s in g["sizes"])
            grid = GridSpec(lambdas=lambdas, base=ensemble, split_kind=g.pop("split_kind", split.kind), **g)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: grid: {exc}") from None

    return RunConfig(dataset, split, ensemble, _resolve(base_dir, out), grid, source)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, str(path), os.path.dirname(os.path.abspath(path)))

"""Datasets: synthetic generators, CSV ingestion and train/valid/test splits."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

__all__ = [
    "Dataset",
    "DataError",
    "Standardizer",
    "SplitSpec",
    "ManifoldEmbedding",
    "gen_2d_gaps",
    "gen_manifold_3d",
    "apply_scaler",
    "attach_chart",
    "load_csv",
    "load_manifest",
    "load_named",
    "split",
    "write_csv",
]


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Per-column z-scoring fitted on one partition; constant columns dropped."""

    mean: np.ndarray
    scale: np.ndarray
    keep: np.ndarray  # boolean mask over input columns

    @classmethod
    def fit(cls, X: np.ndarray, names: Sequence[str] = ()) -> "Standardizer":
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        keep = std > 0
        for j in np.flatnonzero(~keep):
            label = names[j] if j < len(names) else str(j)
            log.warning("dropping constant column %s (z-score undefined)", label)
        return cls(mean[keep], std[keep], keep)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X[:, self.keep] - self.mean) / self.scale


@dataclass(eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list
    tangents: Optional[np.ndarray] = None  # n x D x K analytic tangent Jacobians
    chart: Optional[np.ndarray] = None  # n x K chart coordinates (manifold data)
    name: str = ""
    scaler: Optional[Standardizer] = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y).astype(np.float64).ravel()
        if self.X.shape[0] < 1:
            raise DataError("dataset must have at least one row")
        if self.y.shape[0] != self.X.shape[0]:
            raise DataError("X and y lengths differ")
        if not np.all(np.isin(self.y, (0.0, 1.0))):
            raise DataError("labels must be 0/1")
        if not np.all(np.isfinite(self.X)):
            raise DataError("features contain non-finite values")
        self.feature_names = list(self.feature_names)
        if len(self.feature_names) != self.X.shape[1]:
            raise DataError("feature_names length does not match X")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(
            self,
            X=self.X[idx],
            y=self.y[idx],
            tangents=None if self.tangents is None else self.tangents[idx],
            chart=None if self.chart is None else self.chart[idx],
        )

    def tangent_at(self, i: int) -> Optional[np.ndarray]:
        return None if self.tangents is None else self.tangents[i]


# -- synthetic data -----------------------------------------------------------


def gen_2d_gaps(variant: str, n: int = 400, noise: float = 0.2, seed=0) -> Dataset:
    """Two-dimensional datasets with empty regions between the classes.

    D1: Gaussian blobs at (+1, +1) (label 1) and (-1, -1) (label 0); both
        axes are perfect boundaries.
    D2: uniform squares in quadrants 1 (label 1) and 3 (label 0), with
        quadrants 2 and 4 empty. ``noise`` is unused.
    D3: D1 plus a small blob pair at (+1, -1) (label 1) and (-1, +1)
        (label 0) holding ~5% of the points, so the x2 = 0 boundary costs
        about 5% accuracy while x1 = 0 stays perfect.
    """
    if n < 8:
        raise DataError("need n >= 8 to populate every cluster")
    rng = np.random.default_rng(seed)
    n1 = n // 2
    n0 = n - n1
    if variant == "D1":
        X = np.vstack([rng.normal([1.0, 1.0], noise, size=(n1, 2)),
                       rng.normal([-1.0, -1.0], noise, size=(n0, 2))])
    elif variant == "D2":
        X = np.vstack([rng.uniform(0.1, 1.0, size=(n1, 2)),
                       -rng.uniform(0.1, 1.0, size=(n0, 2))])
    elif variant == "D3":
        extra = max(1, int(round(0.025 * n)))
        X = np.vstack([rng.normal([1.0, 1.0], noise, size=(n1 - extra, 2)),
                       rng.normal([1.0, -1.0], noise / 2, size=(extra, 2)),
                       rng.normal([-1.0, -1.0], noise, size=(n0 - extra, 2)),
                       rng.normal([-1.0, 1.0], noise / 2, size=(extra, 2))])
    else:
        raise DataError(f"unknown 2D variant {variant!r}; expected D1, D2 or D3")
    y = np.r_[np.ones(n1), np.zeros(n0)]
    return Dataset(X, y, ["x1", "x2"], name=variant)


class ManifoldEmbedding:
    """Fixed random map R^2 -> R^3, ``E(u) = B u + V softplus(W u + c)``.

    ``B`` has orthonormal columns so the map stays an immersion; the softplus
    term bends the sheet.
    """

    def __init__(self, seed=0, hidden: int = 16, bend: float = 1.5):
        rng = np.random.default_rng(seed)
        self.B = np.linalg.qr(rng.normal(size=(3, 2)))[0]
        self.W = rng.normal(0.0, 2.0, size=(hidden, 2))
        self.c = rng.normal(0.0, 1.0, size=hidden)
        self.V = rng.normal(0.0, bend / np.sqrt(hidden), size=(3, hidden))

    def embed(self, U: np.ndarray) -> np.ndarray:
        U = np.atleast_2d(U)
        return U @ self.B.T + np.logaddexp(0.0, U @ self.W.T + self.c) @ self.V.T

    def jacobian(self, U: np.ndarray) -> np.ndarray:
        """n x 3 x 2 Jacobians dE/du."""
        U = np.atleast_2d(U)
        s = expit(U @ self.W.T + self.c)  # n x h
        return self.B[None] + np.einsum("dh,nh,hk->ndk", self.V, s, self.W)


def gen_manifold_3d(n: int = 400, seed=0, embedding_seed=0, layout: str = "gaps") -> Dataset:
    """Points on a curved 2-D sheet in R^3, labelled by the sign of chart u1.

    layout "gaps" draws chart points from quadrants 1 and 3 of [-1, 1]^2 only,
    so both chart axes separate the classes (as in D2). "full" fills the
    whole square, leaving u1 as the only informative chart direction.
    """
    if n < 16:
        raise DataError("need n >= 16")
    rng = np.random.default_rng(seed)
    if layout == "gaps":
        U = rng.uniform(0.0, 1.0, size=(n, 2)) * rng.choice([-1.0, 1.0], size=(n, 1))
    elif layout == "full":
        U = rng.uniform(-1.0, 1.0, size=(n, 2))
    else:
        raise DataError(f"unknown chart layout {layout!r}; expected 'gaps' or 'full'")
    emb = ManifoldEmbedding(embedding_seed)
    y = (U[:, 0] > 0).astype(np.float64)
    return Dataset(emb.embed(U), y, ["e1", "e2", "e3"], tangents=emb.jacobian(U), chart=U, name="manifold3d")


# -- CSV ingestion --------------------------------------------------------------


def _map_labels(raw: pd.Series, positive_label) -> np.ndarray:
    values = raw.to_numpy()
    if positive_label is not None:
        pos = str(positive_label)
        as_str = raw.astype(str).to_numpy()
        uniq = set(as_str)
        if len(uniq) > 2 or pos not in uniq:
            raise DataError(f"label column is not binary with positive label {pos!r}: {sorted(uniq)}")
        return (as_str == pos).astype(np.float64)
    uniq = pd.unique(raw)
    if len(uniq) != 2:
        raise DataError(f"label column must take exactly two values, found {len(uniq)}")
    try:
        num = np.asarray(values, dtype=np.float64)
        if set(np.unique(num)) <= {0.0, 1.0}:
            return num
    except (TypeError, ValueError):
        pass
    ordered = sorted(uniq, key=str)
    return (raw.to_numpy() == ordered[1]).astype(np.float64)


def load_csv(path, label_column: str, categorical_columns: Sequence[str] = (), positive_label=None) -> Dataset:
    """Read a headed CSV; one-hot encode categoricals, drop rows with missing values.

    Features are returned unscaled: z-scoring is fitted on the training
    partition inside :func:`split`.
    """
    try:
        df = pd.read_csv(path, skipinitialspace=True, float_precision="round_trip")
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot parse CSV: {exc}") from exc
    if label_column not in df.columns:
        raise DataError(f"{path}: no label column {label_column!r}")
    missing = [c for c in categorical_columns if c not in df.columns]
    if missing:
        raise DataError(f"{path}: unknown categorical columns {missing}")
    df = df.replace("?", np.nan)
    before = len(df)
    df = df.dropna().reset_index(drop=True)
    dropped = before - len(df)
    if dropped:
        log.warning("%s: dropped %d rows with missing values", path, dropped)
    if df.empty:
        raise DataError(f"{path}: no complete rows")
    y = _map_labels(df[label_column], positive_label)
    feats = df.drop(columns=[label_column])
    cats = list(categorical_columns)
    if cats:
        feats = pd.get_dummies(feats, columns=cats, prefix=cats, prefix_sep="=", dtype=np.float64)
    bad = []
    for col in feats.columns:
        converted = pd.to_numeric(feats[col], errors="coerce")
        if converted.isna().any():
            bad.append(col)
        feats[col] = converted
    if bad:
        raise DataError(f"{path}: non-numeric values in columns {bad}; declare them categorical")
    name = os.path.splitext(os.path.basename(str(path)))[0]
    return Dataset(feats.to_numpy(dtype=np.float64), y, [str(c) for c in feats.columns], name=name)


def attach_chart(dataset: Dataset, chart_columns: Sequence[str], embedding_seed=0) -> Dataset:
    """Move chart-coordinate columns out of the features and rebuild tangents.

    For CSVs written from ``gen_manifold_3d``: the chart columns identify each
    point's preimage, from which the embedding's Jacobian is recomputed.
    """
    names = list(dataset.feature_names)
    missing = [c for c in chart_columns if c not in names]
    if missing:
        raise DataError(f"chart columns not found: {missing}")
    cidx = [names.index(c) for c in chart_columns]
    fidx = [j for j in range(len(names)) if j not in cidx]
    U = dataset.X[:, cidx]
    return replace(dataset, X=dataset.X[:, fidx], feature_names=[names[j] for j in fidx], chart=U,
                   tangents=ManifoldEmbedding(embedding_seed).jacobian(U))


def write_csv(dataset: Dataset, path, label_column: str = "label", extra: Optional[dict] = None) -> None:
    """Write features, label and optional extra columns with full precision."""
    cols = {name: dataset.X[:, j] for j, name in enumerate(dataset.feature_names)}
    cols[label_column] = dataset.y.astype(int)
    for k, v in (extra or {}).items():
        cols[k] = v
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def load_manifest(path) -> dict:
    """Parse a TOML dataset manifest; relative paths resolve against its folder."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    out = {}
    for name, entry in raw.items():
        if not isinstance(entry, dict) or "path" not in entry or "label_column" not in entry:
            raise DataError(f"{path}: dataset {name!r} needs path and label_column")
        unknown = set(entry) - {"path", "label_column", "categorical_columns", "positive_label"}
        if unknown:
            raise DataError(f"{path}: dataset {name!r} has unknown keys {sorted(unknown)}")
        entry = dict(entry)
        entry["path"] = os.path.join(base, entry["path"])
        entry.setdefault("categorical_columns", [])
        entry.setdefault("positive_label", None)
        out[name] = entry
    return out


def load_named(name: str, manifest_path) -> Dataset:
    entries = load_manifest(manifest_path)
    if name not in entries:
        raise DataError(f"{manifest_path}: no dataset named {name!r}")
    e = entries[name]
    ds = load_csv(e["path"], e["label_column"], e["categorical_columns"], e["positive_label"])
    ds.name = name
    return ds


# -- splits ---------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    kind: str = "random"
    train_fraction: float = 0.8
    valid_fraction_of_train: float = 0.2
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if self.kind not in ("random", "extrapolation"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        for f in (self.train_fraction, self.valid_fraction_of_train):
            if not 0.0 < f < 1.0:
                raise ValueError("split fractions must lie in (0, 1)")


def apply_scaler(ds: Dataset, scaler: Standardizer) -> Dataset:
    names = [n for n, k in zip(ds.feature_names, scaler.keep) if k]
    tangents = ds.tangents
    if tangents is not None:
        tangents = tangents[:, scaler.keep, :] / scaler.scale[None, :, None]
    return replace(ds, X=scaler.transform(ds.X), feature_names=names, tangents=tangents, scaler=scaler)


def split(dataset: Dataset, spec: SplitSpec):
    """Return ``(train, valid, test)``.

    random: seeded shuffle, then test = (1 - train_fraction) of rows and
    valid = valid_fraction_of_train of the rest.
    extrapolation: the floor(n/2) rows with the smallest L2 norm of globally
    z-scored features (stable order, so ties go to the lower index) form
    train+valid; the remaining rows are test. Valid is then carved at random.

    With ``spec.standardize`` every partition is z-scored using statistics of
    the training partition only.
    """
    n = dataset.n
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "random":
        perm = rng.permutation(n)
        n_test = int(round((1 - spec.train_fraction) * n))
        test_idx, rest = perm[:n_test], perm[n_test:]
    else:
        std = dataset.X.std(axis=0)
        live = std > 0
        z = (dataset.X[:, live] - dataset.X[:, live].mean(axis=0)) / std[live]
        norms = np.linalg.norm(z, axis=1)
        order = np.argsort(norms, kind="stable")
        rest = order[: n // 2]
        test_idx = np.sort(order[n // 2:])
        rest = rng.permutation(np.sort(rest))
    n_valid = int(round(spec.valid_fraction_of_train * len(rest)))
    valid_idx, train_idx = rest[:n_valid], rest[n_valid:]
    if min(len(train_idx), len(valid_idx), len(test_idx)) == 0:
        raise DataError(f"split of {n} rows leaves an empty partition")
    parts = [dataset.subset(np.sort(i)) for i in (train_idx, valid_idx, test_idx)]
    if spec.standardize:
        scaler = Standardizer.fit(parts[0].X, parts[0].feature_names)
        parts = [apply_scaler(p, scaler) for p in parts]
    return tuple(parts)

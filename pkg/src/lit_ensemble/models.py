"""One-hidden-layer MLPs emitting binary log-odds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from . import diffcore as dc

__all__ = [
    "MlpParams",
    "ACTIVATIONS",
    "init_mlp",
    "forward",
    "input_gradient",
    "predict_proba",
    "activation_derivatives",
    "network_expr",
    "param_bindings",
    "save_tensors",
    "load_tensors",
]

ACTIVATIONS = ("relu", "softplus", "sigmoid", "tanh", "identity")
PARAM_NAMES = ("W1", "b1", "w2", "b2")


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Weights of ``f(x) = w2 . act(W1 x + b1) + b2``."""

    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    activation: str = "relu"

    def __post_init__(self):
        W1 = np.asarray(self.W1, dtype=np.float64)
        if W1.ndim != 2 or min(W1.shape) < 1:
            raise ValueError(f"W1 must be a non-empty H x D matrix, got shape {W1.shape}")
        H = W1.shape[0]
        b1 = np.asarray(self.b1, dtype=np.float64)
        w2 = np.asarray(self.w2, dtype=np.float64)
        if b1.shape != (H,) or w2.shape != (H,):
            raise ValueError(f"b1/w2 must have shape ({H},), got {b1.shape} and {w2.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        b2 = float(self.b2)
        if not (np.all(np.isfinite(W1)) and np.all(np.isfinite(b1))
                and np.all(np.isfinite(w2)) and np.isfinite(b2)):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "W1", W1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", b2)

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    def arrays(self) -> list:
        return [self.W1, self.b1, self.w2, np.array(self.b2)]

    def replace_arrays(self, arrays) -> "MlpParams":
        W1, b1, w2, b2 = arrays
        return MlpParams(W1, b1, w2, float(b2), self.activation)


def init_mlp(D: int, H: int = 256, activation: str = "relu", seed=0) -> MlpParams:
    """He-style initialisation: W1 ~ N(0, 2/D), w2 ~ N(0, 2/H), zero biases."""
    if D < 1 or H < 1:
        raise ValueError("D and H must be at least 1")
    rng = np.random.default_rng(seed)
    W1 = rng.normal(0.0, np.sqrt(2.0 / D), size=(H, D))
    w2 = rng.normal(0.0, np.sqrt(2.0 / H), size=H)
    return MlpParams(W1, np.zeros(H), w2, 0.0, activation)


def activation_derivatives(kind: str, z: np.ndarray):
    """Return ``(a, a', a'')`` evaluated at pre-activations ``z``.

    Relu uses derivative 0 at exactly 0.
    """
    if kind == "relu":
        a = np.maximum(z, 0.0)
        d1 = (z > 0).astype(np.float64)
        return a, d1, np.zeros_like(z)
    if kind == "softplus":
        s = expit(z)
        return np.logaddexp(0.0, z), s, s * (1.0 - s)
    if kind == "sigmoid":
        s = expit(z)
        d1 = s * (1.0 - s)
        return s, d1, d1 * (1.0 - 2.0 * s)
    if kind == "tanh":
        t = np.tanh(z)
        d1 = 1.0 - t * t
        return t, d1, -2.0 * t * d1
    if kind == "identity":
        return z, np.ones_like(z), np.zeros_like(z)
    raise ValueError(f"unknown activation {kind!r}")


def _check_input(p: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (p.dim,) or x.ndim > 2:
        raise ValueError(f"expected input with last dimension {p.dim}, got shape {x.shape}")
    return x


def forward(p: MlpParams, x):
    """Log-odds for one point (scalar) or a batch of rows (vector)."""
    x = _check_input(p, x)
    z = x @ p.W1.T + p.b1
    a, _, _ = activation_derivatives(p.activation, z)
    out = a @ p.w2 + p.b2
    return float(out) if x.ndim == 1 else out


def input_gradient(p: MlpParams, x) -> np.ndarray:
    """Gradient of the log-odds w.r.t. the input; shape of ``x``."""
    x = _check_input(p, x)
    z = x @ p.W1.T + p.b1
    _, d1, _ = activation_derivatives(p.activation, z)
    return (d1 * p.w2) @ p.W1


def predict_proba(p: MlpParams, x):
    out = expit(forward(p, x))
    return float(out) if np.ndim(out) == 0 else out


# -- graph form ---------------------------------------------------------------


def network_expr(prefix: str, D: int, H: int, activation: str, x: dc.Expr) -> dc.Expr:
    """Log-odds of an MLP as a diffcore expression.

    Parameters are variables named ``{prefix}.W1`` etc. so several networks can
    live in one graph.
    """
    W1 = dc.var(f"{prefix}.W1", (H, D))
    b1 = dc.var(f"{prefix}.b1", (H,))
    w2 = dc.var(f"{prefix}.w2", (H,))
    b2 = dc.var(f"{prefix}.b2", ())
    hidden = dc.activation(activation, dc.add(dc.matvec(W1, x), b1))
    return dc.add(dc.dot(w2, hidden), b2)


def param_bindings(p: MlpParams, prefix: str) -> dict:
    return {f"{prefix}.{n}": v for n, v in zip(PARAM_NAMES, p.arrays())}


def param_names(prefix: str) -> list:
    return [f"{prefix}.{n}" for n in PARAM_NAMES]


# -- text serialisation ---------------------------------------------------------


def _fmt_shape(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(token: str) -> tuple:
    return () if token == "scalar" else tuple(int(t) for t in token.split("x"))


def save_tensors(path, tensors: dict, meta: Optional[dict] = None) -> None:
    """Write ``name shape values...`` lines; ``repr`` floats round-trip exactly.

    ``meta`` entries become leading ``# key value`` lines.
    """
    with open(path, "w") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k} {v}\n")
        for name, arr in tensors.items():
            if any(c.isspace() for c in name):
                raise ValueError(f"tensor name {name!r} contains whitespace")
            arr = np.asarray(arr, dtype=np.float64)
            values = " ".join(repr(float(v)) for v in arr.ravel())
            fh.write(f"{name} {_fmt_shape(arr.shape)} {values}\n")


def load_tensors(path):
    """Inverse of :func:`save_tensors`; returns ``(tensors, meta)``."""
    tensors, meta = {}, {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(" ")
                meta[key] = value
                continue
            parts = line.split(" ")
            name, shape = parts[0], _parse_shape(parts[1])
            values = np.array([float(t) for t in parts[2:]], dtype=np.float64)
            expected = int(np.prod(shape)) if shape else 1
            if values.size != expected:
                raise ValueError(f"{path}:{lineno}: {name} expects {expected} values, got {values.size}")
            tensors[name] = values.reshape(shape)
    return tensors, meta

"""Dense float64 matrix helpers: products, activations, batch
standardization and singular-value based rank measures.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Every
function returns a new array and never mutates its inputs.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Kind",
    "Nonlinearity",
    "NONLINEARITIES",
    "RankSettings",
    "as_matrix",
    "matmul",
    "apply_nonlinearity",
    "batch_standardize",
    "singular_values",
    "rank_from_singular_values",
    "numerical_rank",
    "nuclear_norm",
    "round_half_away",
]

# rows whose variance falls below this are treated as dead channels
_DEGENERATE_VAR = 1e-12


class Kind(str, enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"
    RELU6 = "relu6"
    LEAKY_RELU = "leakyrelu"
    ELU = "elu"
    SOFTPLUS = "softplus"
    HARD_SWISH = "hswish"
    SILU = "silu"


_ALIASES = {
    "none": Kind.IDENTITY,
    "linear": Kind.IDENTITY,
    "leaky_relu": Kind.LEAKY_RELU,
    "leaky-relu": Kind.LEAKY_RELU,
    "hardswish": Kind.HARD_SWISH,
    "hard_swish": Kind.HARD_SWISH,
    "hard-swish": Kind.HARD_SWISH,
    "swish": Kind.SILU,
    "swish1": Kind.SILU,
}


@dataclass(frozen=True)
class Nonlinearity:
    """Element-wise activation.

    ``slope`` is only read by LeakyReLU and ``alpha`` only by ELU.
    """

    kind: Kind
    slope: float = 0.01
    alpha: float = 1.0

    @classmethod
    def parse(cls, name: "str | Kind | Nonlinearity") -> "Nonlinearity":
        if isinstance(name, Nonlinearity):
            return name
        if isinstance(name, Kind):
            return cls(name)
        key = name.strip().lower()
        if key in _ALIASES:
            return cls(_ALIASES[key])
        try:
            return cls(Kind(key))
        except ValueError:
            valid = ", ".join(k.value for k in Kind)
            raise ValueError(f"unknown nonlinearity {name!r} (expected one of: {valid})") from None

    @property
    def name(self) -> str:
        return self.kind.value

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return apply_nonlinearity(self, x)


NONLINEARITIES: dict[str, Nonlinearity] = {k.value: Nonlinearity(k) for k in Kind}


@dataclass(frozen=True)
class RankSettings:
    """A singular value counts toward the rank iff ``s > rel_tolerance * s_max``."""

    rel_tolerance: float = 1e-2

    def __post_init__(self):
        if not 0.0 < self.rel_tolerance < 1.0:
            raise ValueError(f"rel_tolerance must lie in (0, 1), got {self.rel_tolerance}")


def round_half_away(x: float) -> int:
    """Round to the nearest integer, halves away from zero (2.5 -> 3, -2.5 -> -3)."""
    r = math.floor(abs(x) + 0.5)
    return int(r if x >= 0 else -r)


def as_matrix(m, *, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite, non-empty 2-D float64 array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty (shape {arr.shape})")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, name="left operand")
    b = as_matrix(b, name="right operand")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def apply_nonlinearity(f: Nonlinearity, m) -> np.ndarray:
    x = np.asarray(m, dtype=np.float64)
    kind = f.kind
    if kind is Kind.IDENTITY:
        return x.copy()
    if kind is Kind.RELU:
        return np.maximum(x, 0.0)
    if kind is Kind.RELU6:
        return np.clip(x, 0.0, 6.0)
    if kind is Kind.LEAKY_RELU:
        return np.where(x >= 0.0, x, f.slope * x)
    if kind is Kind.ELU:
        return np.where(x >= 0.0, x, f.alpha * np.expm1(np.minimum(x, 0.0)))
    if kind is Kind.SOFTPLUS:
        return np.logaddexp(0.0, x)
    if kind is Kind.HARD_SWISH:
        return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0
    if kind is Kind.SILU:
        # logistic via tanh avoids overflow for large |x|
        return x * 0.5 * (1.0 + np.tanh(0.5 * x))
    raise ValueError(f"unsupported nonlinearity {kind!r}")


def batch_standardize(m) -> np.ndarray:
    """Standardize each row to zero mean and unit (population) variance.

    Rows whose variance is below 1e-12 come back as zeros instead of being
    divided by a vanishing scale.
    """
    x = np.asarray(m, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {x.shape}")
    if x.shape[1] < 2:
        raise ValueError(f"batch_standardize needs at least 2 columns, got {x.shape[1]}")
    out = x - x.mean(axis=1, keepdims=True)
    var = np.einsum("ij,ij->i", out, out) / x.shape[1]
    dead = var < _DEGENERATE_VAR
    scale = np.where(dead, 0.0, 1.0 / np.sqrt(np.where(dead, 1.0, var)))
    out *= scale[:, None]
    return out


def singular_values(m) -> np.ndarray:
    """Non-increasing singular values, ``min(rows, cols)`` of them."""
    x = as_matrix(m)
    return np.linalg.svd(x, compute_uv=False)


def rank_from_singular_values(sv: np.ndarray, settings: RankSettings = RankSettings()) -> int:
    if sv.size == 0 or sv[0] <= 0.0:
        return 0
    return int(np.count_nonzero(sv > settings.rel_tolerance * sv[0]))


def numerical_rank(m, settings: RankSettings = RankSettings()) -> int:
    return rank_from_singular_values(singular_values(m), settings)


def nuclear_norm(m) -> float:
    return float(np.sum(singular_values(m)))

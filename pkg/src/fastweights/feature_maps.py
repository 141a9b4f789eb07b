"""Kernel feature maps applied to keys and queries, plus sum normalization."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numeric
from .errors import DimensionError, NearZeroSum


class FeatureMapKind(str, Enum):
    IDENTITY = "identity"
    LINEAR = "linear"
    RELU = "relu"
    ELU1 = "elu1"

    @property
    def needs_weight(self) -> bool:
        return self in (FeatureMapKind.LINEAR, FeatureMapKind.RELU)

    @property
    def needs_bias(self) -> bool:
        return self is FeatureMapKind.RELU

    @property
    def square(self) -> bool:
        """Whether the map forces m == d."""
        return self in (FeatureMapKind.IDENTITY, FeatureMapKind.ELU1)


@dataclass
class FeatureMapParams:
    W_phi: np.ndarray | None = None  # (..., m, d)
    b_phi: np.ndarray | None = None  # (..., m)


def default_eps_sum(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.float32 else 1e-12


def _check(kind: FeatureMapKind, params: FeatureMapParams, d: int) -> None:
    if kind.needs_weight != (params.W_phi is not None):
        raise DimensionError(f"{kind.value} map: W_phi presence mismatch")
    if kind.needs_bias != (params.b_phi is not None):
        raise DimensionError(f"{kind.value} map: b_phi presence mismatch")
    if params.W_phi is not None and params.W_phi.shape[-1] != d:
        raise DimensionError(f"W_phi has {params.W_phi.shape[-1]} columns, input has {d}")


def preactivation(kind: FeatureMapKind, params: FeatureMapParams, x: np.ndarray) -> np.ndarray:
    """The argument of the nonlinearity (W x + b for learned maps, x otherwise)."""
    kind = FeatureMapKind(kind)
    _check(kind, params, x.shape[-1])
    if not kind.needs_weight:
        return x
    h = np.matmul(params.W_phi, x[..., None])[..., 0]
    if params.b_phi is not None:
        h = h + params.b_phi
    return h


def activate(kind: FeatureMapKind, h: np.ndarray) -> np.ndarray:
    if kind is FeatureMapKind.RELU:
        return numeric.relu(h)
    if kind is FeatureMapKind.ELU1:
        return numeric.elu1(h)
    return h


def activate_grad(kind: FeatureMapKind, h: np.ndarray, dphi: np.ndarray) -> np.ndarray:
    """Backpropagate ``dphi`` through the nonlinearity at preactivation ``h``."""
    if kind is FeatureMapKind.RELU:
        return dphi * (h > 0)
    if kind is FeatureMapKind.ELU1:
        return dphi * np.where(h >= 0, 1, np.exp(np.minimum(h, 0)))
    return dphi


def apply_feature_map(kind, params: FeatureMapParams, x: np.ndarray) -> np.ndarray:
    """Map ``x[..., d]`` to ``phi(x)[..., m]``."""
    kind = FeatureMapKind(kind)
    return activate(kind, preactivation(kind, params, x))


def sum_normalize(u: np.ndarray, eps: float | None = None) -> np.ndarray:
    """Rescale ``u`` along its last axis so the components sum to one.

    Raises NearZeroSum when any ``|sum(u)| <= eps``; the index of the first
    offending vector (flattened over leading dims) is attached as ``t``.
    """
    u = np.asarray(u)
    if eps is None:
        eps = default_eps_sum(u.dtype)
    s = u.sum(axis=-1, keepdims=True)
    bad = np.abs(s[..., 0]) <= eps
    if bad.any():
        first = int(np.flatnonzero(bad)[0]) if bad.ndim else None
        raise NearZeroSum(f"feature sum within {eps:g} of zero", first)
    return u / s


def sum_normalize_grad(normalized: np.ndarray, total: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Gradient through ``u / sum(u)`` given the normalized output and the sum."""
    inner = (dout * normalized).sum(axis=-1, keepdims=True)
    return (dout - inner) / total

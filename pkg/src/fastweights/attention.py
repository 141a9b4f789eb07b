"""Exact attention baselines used as oracles for the recurrent rules."""

from __future__ import annotations

import numpy as np

from . import numeric
from .errors import DimensionError, NormalizerUnderflow
from .rules import default_eps_norm


def _check(Q, K, V):
    Q, K, V = (np.asarray(a) for a in (Q, K, V))
    if Q.shape != K.shape or Q.shape[:-1] != V.shape[:-1]:
        raise DimensionError(f"Q {Q.shape}, K {K.shape}, V {V.shape} disagree")
    return Q, K, V


def local_attention(Q, K, V, window: int) -> np.ndarray:
    """Causal softmax attention over the last ``window`` positions (inclusive).

    ``Q``, ``K``, ``V`` are ``(T, d)``; returns ``(T, d)``.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    Q, K, V = _check(Q, K, V)
    T, d = Q.shape
    scale = 1.0 / np.sqrt(d)
    Y = np.empty_like(V)
    for t in range(T):
        lo = max(0, t - window + 1)
        scores = numeric.matvec(K[lo:t + 1], Q[t]) * scale
        w = numeric.softmax(scores)
        Y[t] = numeric.matvec(V[lo:t + 1].T.copy(), w)
    return Y


def softmax_attention(Q, K, V) -> np.ndarray:
    """Exact causal attention with similarity ``exp(k.q / sqrt(d))``."""
    Q = np.asarray(Q)
    return local_attention(Q, K, V, window=max(1, Q.shape[0]))


def kernel_attention_direct(phiK, phiQ, V, eps: float | None = None) -> np.ndarray:
    """Kernelized attention evaluated as an explicit double loop over (t, j).

    ``y_t = sum_j v_j (phiK_j . phiQ_t) / sum_i (phiK_i . phiQ_t)`` for j, i <= t.
    No running state is carried between timesteps.
    """
    phiK, phiQ, V = (np.asarray(a) for a in (phiK, phiQ, V))
    if phiK.shape != phiQ.shape or phiK.shape[0] != V.shape[0]:
        raise DimensionError(f"phiK {phiK.shape}, phiQ {phiQ.shape}, V {V.shape} disagree")
    if eps is None:
        eps = default_eps_norm(V.dtype)
    T = V.shape[0]
    Y = np.empty_like(V)
    for t in range(T):
        num = np.zeros(V.shape[1], dtype=V.dtype)
        den = V.dtype.type(0)
        for j in range(t + 1):
            s = numeric.dot(phiK[j], phiQ[t])
            num = num + V[j] * s
            den = den + s
        if not abs(den) > eps:
            raise NormalizerUnderflow(f"|sum of similarities| <= {eps:g}", t)
        Y[t] = num / den
    return Y

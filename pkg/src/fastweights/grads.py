"""Hand-derived adjoints of the rule scans, and a finite-difference checker.

The backward pass walks the state recurrence in reverse using the states
stored by ``scan``. No forward recomputation happens here, which is why the
cache holds S_t for every t.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numeric
from .errors import ConfigError, DimensionError
from .feature_maps import FeatureMapKind, activate_grad, sum_normalize_grad
from .rules import (
    RuleConfig,
    RuleKind,
    RuleParams,
    SequenceCache,
    _mtv,
    _mv,
    random_params,
    scan,
)


@dataclass
class GradientBundle:
    dX: np.ndarray
    dQ: np.ndarray
    dK: np.ndarray
    dV: np.ndarray
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"X": self.dX, "Q": self.dQ, "K": self.dK, "V": self.dV, **self.params}


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    shape = tuple(shape)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def outer_sum(a: np.ndarray, b: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """``unbroadcast(outer(a, b), shape)`` without materializing the outer products."""
    shape = tuple(shape)
    lead = shape[:-2]
    a_lead, b_lead = a.shape[:-1], b.shape[:-1]
    full = np.broadcast_shapes(a_lead, b_lead)
    p = len(lead)
    if p > len(full) or (p and full[len(full) - p:] != lead):
        return unbroadcast(numeric.outer(a, b), shape)
    A = np.broadcast_to(a, full + a.shape[-1:])
    B = np.broadcast_to(b, full + b.shape[-1:])
    n = int(np.prod(full[:len(full) - p], dtype=np.int64))
    A = np.moveaxis(A.reshape((n,) + lead + a.shape[-1:]), 0, -1)  # (*lead, i, n)
    B = np.moveaxis(B.reshape((n,) + lead + b.shape[-1:]), 0, -2)  # (*lead, n, j)
    return np.matmul(A, B).reshape(shape)


def _shifted(a: np.ndarray) -> np.ndarray:
    """``a`` delayed by one step along time, with zeros at t = 0."""
    out = np.zeros_like(a)
    out[1:] = a[:-1]
    return out


def _input_grad(grad: np.ndarray, like: np.ndarray) -> np.ndarray:
    return np.moveaxis(unbroadcast(grad, like.shape), 0, -2)


def backward_scan(config: RuleConfig, params: RuleParams, cache: SequenceCache,
                  dY: np.ndarray) -> GradientBundle:
    """Vector-Jacobian product of ``scan`` with cotangent ``dY`` (shape of Y)."""
    if cache.config != config:
        raise ConfigError("cache was produced by a different rule configuration")
    params.check(config)
    c = cache
    rule = config.rule
    dYt = np.moveaxis(np.asarray(dY, dtype=c.Y.dtype), -2, 0)
    if dYt.shape != c.Y.shape:
        dYt = np.broadcast_to(dYt, c.Y.shape)
    T = c.T
    S, kt, qt = c.S, c.kt, c.qt
    S_prev = _shifted(S)
    V = np.broadcast_to(c.V, S.shape[:-1])

    # readout: y = S q  (or u / n with n = z . q)
    if config.attention_norm:
        du = dYt / c.n[..., None]
        dn = -(dYt * c.Y).sum(axis=-1) / c.n
        dqt = _mtv(S, du) + dn[..., None] * c.z
        dS_dir = numeric.outer(du, qt)
        dz_dir = dn[..., None] * qt
    else:
        dqt = _mtv(S, dYt)
        dS_dir = numeric.outer(dYt, qt)

    # reverse recurrence for the state adjoint
    dS_tot = np.empty_like(dS_dir)
    carry = np.zeros(dS_dir.shape[1:], dtype=dS_dir.dtype)
    if rule is RuleKind.ADD:
        for t in range(T - 1, -1, -1):
            carry = dS_dir[t] + carry
            dS_tot[t] = carry
    elif rule is RuleKind.GATED:
        gb = c.g[..., None, None]
        for t in range(T - 1, -1, -1):
            carry = dS_dir[t] + carry
            dS_tot[t] = carry
            carry = gb[t] * carry
    elif rule is RuleKind.DELTA:
        gb = c.g[..., None, None]
        for t in range(T - 1, -1, -1):
            carry = dS_dir[t] + carry
            dS_tot[t] = carry
            carry = carry - gb[t] * numeric.outer(_mv(carry, kt[t]), kt[t])
    else:
        G = numeric.outer(c.zs, c.fs)
        for t in range(T - 1, -1, -1):
            carry = dS_dir[t] + carry
            dS_tot[t] = carry
            carry = G[t] * carry

    dz_tot = z_prev = None
    if config.attention_norm:
        z_prev = _shifted(c.z)
        if rule is RuleKind.GATED:
            dz_tot = np.empty_like(dz_dir)
            zc = np.zeros(dz_dir.shape[1:], dtype=dz_dir.dtype)
            gz = c.g[..., None]
            for t in range(T - 1, -1, -1):
                zc = dz_dir[t] + zc
                dz_tot[t] = zc
                zc = gz[t] * zc
        else:
            dz_tot = np.flip(np.cumsum(np.flip(dz_dir, 0), axis=0), 0)

    # local derivatives of each update
    grads: dict[str, np.ndarray] = {}
    dg = None
    dX = np.zeros(np.broadcast_shapes(c.X.shape, S.shape[:-2] + c.X.shape[-1:]), dtype=c.X.dtype)
    if rule is RuleKind.ADD:
        dv = _mv(dS_tot, kt)
        dkt = _mtv(dS_tot, V)
        if dz_tot is not None:
            dkt = dkt + dz_tot
    elif rule is RuleKind.GATED:
        g1 = (1 - c.g)[..., None]
        dv = g1 * _mv(dS_tot, kt)
        dkt = g1 * _mtv(dS_tot, V)
        dg = (dS_tot * (S_prev - numeric.outer(V, kt))).sum(axis=(-2, -1))
        if dz_tot is not None:
            dkt = dkt + g1 * dz_tot
            dg = dg + (dz_tot * (z_prev - kt)).sum(axis=-1)
    elif rule is RuleKind.DELTA:
        r = V - _mv(S_prev, kt)
        dSk = _mv(dS_tot, kt)
        dr = c.g[..., None] * dSk
        dv = dr
        dkt = c.g[..., None] * _mtv(dS_tot, r) - _mtv(S_prev, dr)
        dg = (r * dSk).sum(axis=-1)
        if dz_tot is not None:
            dkt = dkt + dz_tot
    else:
        dG = dS_tot * S_prev
        dzs = _mv(dG, c.fs)
        dfs = _mtv(dG, c.zs)
        dv = _mv(dS_tot, kt)
        dkt = _mtv(dS_tot, V)
        dpz = dzs * c.zs * (1 - c.zs)
        dpf = dfs * c.fs * (1 - c.fs)
        grads["W_z"] = outer_sum(dpz, c.X, params.W_z.shape)
        grads["b_z"] = unbroadcast(dpz, params.b_z.shape)
        grads["W_f"] = outer_sum(dpf, c.X, params.W_f.shape)
        grads["b_f"] = unbroadcast(dpf, params.b_f.shape)
        dX = _mtv(params.W_z, dpz) + _mtv(params.W_f, dpf)

    if dg is not None:
        da = dg * c.g * (1 - c.g)
        grads["w_g"] = unbroadcast(da[..., None] * c.X, params.w_g.shape)
        grads["b_g"] = unbroadcast(da, np.shape(params.b_g))
        dX = da[..., None] * params.w_g

    # feature maps (shared between keys and queries)
    kind = config.feature_map
    if config.sum_norm:
        dkt = sum_normalize_grad(kt, c.sk, dkt)
        dqt = sum_normalize_grad(qt, c.sq, dqt)
    dhk = activate_grad(kind, c.hk, dkt)
    dhq = activate_grad(kind, c.hq, dqt)
    if kind.needs_weight:
        dK = _mtv(params.W_phi, dhk)
        dQ = _mtv(params.W_phi, dhq)
        grads["W_phi"] = (outer_sum(dhk, c.K, params.W_phi.shape)
                           + outer_sum(dhq, c.Q, params.W_phi.shape))
        if kind.needs_bias:
            grads["b_phi"] = unbroadcast(dhk + dhq, params.b_phi.shape)
    else:
        dK, dQ = dhk, dhq

    # keep the bundle in the same key order as the parameters
    ordered = {name: grads[name] for name in config.param_shapes()}
    return GradientBundle(
        dX=_input_grad(dX, c.X),
        dQ=_input_grad(dQ, c.Q),
        dK=_input_grad(dK, c.K),
        dV=_input_grad(dv, c.V),
        params=ordered,
    )


@dataclass
class FDReport:
    max_rel_err: float
    worst_coordinate: tuple[str, tuple[int, ...]] | None
    n_checked: int

    def __str__(self) -> str:
        where = "-" if self.worst_coordinate is None else f"{self.worst_coordinate[0]}{list(self.worst_coordinate[1])}"
        return f"max_rel_err={self.max_rel_err:.3e} worst={where} coords={self.n_checked}"


def finite_difference_check(loss_fn: Callable[[dict[str, np.ndarray]], float],
                            params: dict[str, np.ndarray] | np.ndarray,
                            analytic: dict[str, np.ndarray] | np.ndarray,
                            eps: float = 1e-5, floor: float = 1e-8) -> FDReport:
    """Compare ``analytic`` against central differences of ``loss_fn``.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    single = isinstance(params, np.ndarray)
    if single:
        params = {"theta": params}
        analytic = {"theta": analytic}
    params = {k: np.array(v, copy=True) for k, v in params.items()}

    def evaluate(p):
        value = loss_fn(p["theta"] if single else p)
        if not np.isfinite(value):
            raise FloatingPointError("loss is not finite")
        return value

    evaluate(params)
    worst, worst_at, count = 0.0, None, 0
    for name, value in params.items():
        grad = np.asarray(analytic[name])
        if grad.shape != value.shape:
            raise DimensionError(f"gradient for {name} has shape {grad.shape}, expected {value.shape}")
        for idx in itertools.product(*(range(s) for s in value.shape)):
            orig = value[idx]
            value[idx] = orig + eps
            f_plus = evaluate(params)
            value[idx] = orig - eps
            f_minus = evaluate(params)
            value[idx] = orig
            numeric_grad = float((f_plus - f_minus) / (2 * eps))
            a = float(grad[idx])
            err = abs(a - numeric_grad) / max(abs(a), abs(numeric_grad), floor)
            count += 1
            if err > worst or worst_at is None:
                worst, worst_at = err, (name, tuple(int(i) for i in idx))
    return FDReport(worst, worst_at, count)


def legal_configs(d: int, m: int) -> list[RuleConfig]:
    """Every legal rule x feature map x normalization combination.

    Square maps (identity, elu1) use m = d; the others use the given m.
    """
    out = []
    for rule in RuleKind:
        for kind in FeatureMapKind:
            mm = d if kind.square else m
            for norm in (False, True):
                if rule is RuleKind.DECAY and norm:
                    continue
                for sn in ((False, True) if rule is RuleKind.DELTA else (False,)):
                    out.append(RuleConfig(rule, d=d, m=mm, feature_map=kind, attention_norm=norm, sum_norm=sn))
    return out


def gradcheck_problem(config: RuleConfig, seed: int, T: int = 8, dtype=np.float64):
    """Random parameters, inputs and a fixed linear functional for a gradient check.

    Normalized configurations get positive keys/queries and weights so the
    divisors stay away from zero; delta without sum normalization gets short
    keys so that ``I - g k k^T`` stays contractive.
    """
    rng = np.random.default_rng(seed)
    d = config.d
    params = random_params(config, rng, dtype)
    X, Q, K, V = (rng.standard_normal((T, d)).astype(dtype) for _ in range(4))
    if params.W_phi is not None:
        params.W_phi = params.W_phi / np.sqrt(d)
    if config.attention_norm or config.sum_norm:
        Q = 0.5 * np.abs(Q) + 0.2
        K = 0.5 * np.abs(K) + 0.2
        if params.W_phi is not None:
            params.W_phi = np.abs(params.W_phi) + 0.1 / np.sqrt(d)
        if params.b_phi is not None:
            params.b_phi = 0.1 * params.b_phi
    if config.rule is RuleKind.DELTA and not config.sum_norm:
        K = 0.5 * K
    weights = rng.standard_normal((T, d)).astype(dtype)
    return params, {"X": X, "Q": Q, "K": K, "V": V}, weights


def gradcheck_rule(config: RuleConfig, seed: int, T: int = 8, eps: float = 1e-5,
                   dtype=np.float64, fd_dtype=np.longdouble) -> FDReport:
    """Finite-difference check of ``backward_scan`` for one configuration.

    The analytic gradient is computed in ``dtype``. Central differences are
    evaluated in ``fd_dtype`` (extended precision by default): in plain double
    the cancellation noise is ~1e-11, which swamps the 1e-8 error floor on
    coordinates whose true gradient is exactly zero.
    """
    params, inputs, weights = gradcheck_problem(config, seed, T, dtype)
    w_fd = weights.astype(fd_dtype)

    def loss(flat: dict[str, np.ndarray]) -> float:
        flat = {k: np.asarray(v, dtype=fd_dtype) for k, v in flat.items()}
        p = RuleParams(**{k: v for k, v in flat.items() if k not in inputs})
        Y, _ = scan(config, p, flat["X"], flat["Q"], flat["K"], flat["V"])
        return (Y * w_fd).sum()

    _, cache = scan(config, params, inputs["X"], inputs["Q"], inputs["K"], inputs["V"])
    bundle = backward_scan(config, params, cache, weights)
    theta = {k: v.astype(fd_dtype) for k, v in {**inputs, **params.as_dict()}.items()}
    # the add rule ignores X; its zero gradient is still checked
    return finite_difference_check(loss, theta, bundle.as_dict(), eps=eps)

"""Recurrent update rules replacing causal attention.

Four rules share one state layout ``S[..., d, m]`` (plus an optional
normalizer ``z[..., m]``):

* ``add``   S <- S + v k^T
* ``gated`` S <- g S + (1 - g) v k^T            (scalar gate g)
* ``delta`` S <- S - g (S k) k^T + g v k^T      (scalar gate g)
* ``decay`` S <- G * S + v k^T,  G = sigma(W_z x + b_z) sigma(W_f x + b_f)^T

where k, q are the feature-mapped (optionally sum-normalized) key and query.
The readout is ``S q``, divided by ``z . q`` when attention normalization is on.

Every function accepts leading batch dimensions. Rule parameters may carry
their own leading dims (e.g. one set per head) which broadcast against the
batch dims of the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from enum import Enum

import numpy as np

from . import numeric
from .errors import (
    ConfigError,
    DimensionError,
    DivergedState,
    DivergenceError,
    NearZeroSum,
    NormalizerUnderflow,
)
from .feature_maps import (
    FeatureMapKind,
    FeatureMapParams,
    activate,
    default_eps_sum,
    preactivation,
)


class RuleKind(str, Enum):
    ADD = "add"
    GATED = "gated"
    DELTA = "delta"
    DECAY = "decay"

    @property
    def scalar_gate(self) -> bool:
        return self in (RuleKind.GATED, RuleKind.DELTA)


def default_eps_norm(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.float32 else 1e-12


@dataclass(frozen=True)
class RuleConfig:
    rule: RuleKind
    d: int
    m: int
    feature_map: FeatureMapKind = FeatureMapKind.IDENTITY
    attention_norm: bool = False
    sum_norm: bool = False
    # sum normalization outside the delta rule is only allowed when asked for
    experimental: bool = False
    eps_sum: float | None = None
    eps_norm: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "rule", RuleKind(self.rule))
        object.__setattr__(self, "feature_map", FeatureMapKind(self.feature_map))
        self.validate()

    def validate(self) -> None:
        if self.d < 1 or self.m < 1:
            raise ConfigError(f"d and m must be positive, got d={self.d}, m={self.m}")
        if self.feature_map.square and self.m != self.d:
            raise ConfigError(f"{self.feature_map.value} feature map needs m == d ({self.m} != {self.d})")
        if self.rule is RuleKind.DECAY and self.attention_norm:
            raise ConfigError("decay rule carries no normalizer: attention_norm is not applicable")
        if self.sum_norm and self.rule is not RuleKind.DELTA and not self.experimental:
            raise ConfigError("sum_norm is defined for the delta rule; set experimental=True to force it")

    def replace(self, **changes) -> "RuleConfig":
        return replace(self, **changes)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Trailing shapes of the parameters this configuration uses."""
        shapes: dict[str, tuple[int, ...]] = {}
        if self.feature_map.needs_weight:
            shapes["W_phi"] = (self.m, self.d)
        if self.feature_map.needs_bias:
            shapes["b_phi"] = (self.m,)
        if self.rule is RuleKind.DECAY:
            shapes.update(W_z=(self.d, self.d), b_z=(self.d,), W_f=(self.m, self.d), b_f=(self.m,))
        elif self.rule.scalar_gate:
            shapes.update(w_g=(self.d,), b_g=())
        return shapes

    def eps_sum_for(self, dtype) -> float:
        return default_eps_sum(dtype) if self.eps_sum is None else self.eps_sum

    def eps_norm_for(self, dtype) -> float:
        return default_eps_norm(dtype) if self.eps_norm is None else self.eps_norm


@dataclass
class RuleParams:
    """Feature-map and gate parameters of one rule layer.

    Only the fields named by ``RuleConfig.param_shapes`` are set.
    """

    W_phi: np.ndarray | None = None
    b_phi: np.ndarray | None = None
    W_z: np.ndarray | None = None
    b_z: np.ndarray | None = None
    W_f: np.ndarray | None = None
    b_f: np.ndarray | None = None
    w_g: np.ndarray | None = None
    b_g: np.ndarray | None = None

    @property
    def feature(self) -> FeatureMapParams:
        return FeatureMapParams(self.W_phi, self.b_phi)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def check(self, config: RuleConfig) -> None:
        wanted = config.param_shapes()
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name not in wanted:
                if value is not None:
                    raise DimensionError(f"{f.name} is not used by {config.rule.value}/{config.feature_map.value}")
                continue
            if value is None:
                raise DimensionError(f"{config.rule.value} rule needs {f.name}")
            trailing = wanted[f.name]
            if np.shape(value)[np.ndim(value) - len(trailing):] != trailing:
                raise DimensionError(f"{f.name} has shape {np.shape(value)}, expected (..., {trailing})")


def random_params(config: RuleConfig, rng: np.random.Generator, dtype=np.float64,
                  lead: tuple[int, ...] = (), scale: float = 1.0) -> RuleParams:
    """Gaussian parameters for tests and gradient checks."""
    out = {}
    for name, shape in config.param_shapes().items():
        out[name] = (scale * rng.standard_normal(lead + shape)).astype(dtype)
    return RuleParams(**out)


@dataclass
class FastWeightState:
    S: np.ndarray
    z: np.ndarray | None = None

    @property
    def nbytes(self) -> int:
        return self.S.nbytes + (0 if self.z is None else self.z.nbytes)

    def copy(self) -> "FastWeightState":
        return FastWeightState(self.S.copy(), None if self.z is None else self.z.copy())


def init_state(config: RuleConfig, batch_shape: tuple[int, ...] = (), dtype=np.float64) -> FastWeightState:
    S = np.zeros(tuple(batch_shape) + (config.d, config.m), dtype=dtype)
    z = np.zeros(tuple(batch_shape) + (config.m,), dtype=dtype) if config.attention_norm else None
    return FastWeightState(S, z)


def _mv(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.matmul(A, x[..., None])[..., 0]


def _mtv(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.matmul(np.swapaxes(A, -1, -2), x[..., None])[..., 0]


def _dotlast(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b).sum(axis=-1)


def gate_factors(params: RuleParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """The two sigmoid vectors whose outer product is the decay matrix."""
    zs = numeric.sigmoid(_mv(params.W_z, x) + params.b_z)
    fs = numeric.sigmoid(_mv(params.W_f, x) + params.b_f)
    return zs, fs


def compute_gate_matrix(params: RuleParams, x: np.ndarray) -> np.ndarray:
    if params.W_z is None or params.W_f is None:
        raise ConfigError("decay gate parameters missing")
    zs, fs = gate_factors(params, x)
    return numeric.outer(zs, fs)


def scalar_gate(params: RuleParams, x: np.ndarray) -> np.ndarray:
    return numeric.sigmoid(_dotlast(x, params.w_g) + params.b_g)


def _map_keys(config: RuleConfig, params: RuleParams, k: np.ndarray):
    """Returns (preactivation, phi, sum or None, mapped key)."""
    h = preactivation(config.feature_map, params.feature, k)
    phi = activate(config.feature_map, h)
    if not config.sum_norm:
        return h, phi, None, phi
    s = phi.sum(axis=-1, keepdims=True)
    return h, phi, s, phi / s


def _check_forced(forced) -> None:
    f = np.asarray(forced)
    if not np.all((f >= 0) & (f <= 1)):
        raise ValueError("forced gate values must lie in [0, 1]")


def step(config: RuleConfig, params: RuleParams, state: FastWeightState,
         x: np.ndarray, q: np.ndarray, k: np.ndarray, v: np.ndarray,
         forced_gate=None) -> tuple[FastWeightState, np.ndarray]:
    """One recurrent transition; returns the new state and the readout."""
    params.check(config)
    if state.S.shape[-2:] != (config.d, config.m):
        raise DimensionError(f"state shape {state.S.shape} does not match d={config.d}, m={config.m}")
    if (state.z is not None) != config.attention_norm:
        raise DimensionError("normalizer presence does not match attention_norm")
    dtype = state.S.dtype
    eps_sum = config.eps_sum_for(dtype)
    with np.errstate(all="ignore"):
        _, _, sk, kt = _map_keys(config, params, k)
        _, _, sq, qt = _map_keys(config, params, q)
    if config.sum_norm:
        if np.any(np.abs(sk) <= eps_sum) or np.any(np.abs(sq) <= eps_sum):
            raise NearZeroSum(f"feature sum within {eps_sum:g} of zero")

    S, z = state.S, state.z
    z_new = None
    with np.errstate(all="ignore"):
        write = numeric.outer(v, kt)
        if config.rule is RuleKind.ADD:
            S_new = S + write
            if z is not None:
                z_new = z + kt
        elif config.rule is RuleKind.GATED:
            g = scalar_gate(params, x) if forced_gate is None else np.asarray(forced_gate, dtype=dtype)
            if forced_gate is not None:
                _check_forced(g)
            g = np.asarray(g)[..., None]
            S_new = g[..., None] * S + (1 - g[..., None]) * write
            if z is not None:
                z_new = g * z + (1 - g) * kt
        elif config.rule is RuleKind.DELTA:
            g = scalar_gate(params, x) if forced_gate is None else np.asarray(forced_gate, dtype=dtype)
            if forced_gate is not None:
                _check_forced(g)
            r = v - _mv(S, kt)
            S_new = S + np.asarray(g)[..., None, None] * numeric.outer(r, kt)
            if z is not None:
                z_new = z + kt
        else:
            if forced_gate is None:
                G = compute_gate_matrix(params, x)
            else:
                G = np.asarray(forced_gate, dtype=dtype)
                _check_forced(G)
            S_new = G * S + write

        u = _mv(S_new, qt)
        if z_new is not None:
            n = _dotlast(z_new, qt)
            eps = config.eps_norm_for(dtype)
            if np.any(~(np.abs(n) > eps)):
                raise NormalizerUnderflow(f"|z . q| <= {eps:g}")
            y = u / n[..., None]
        else:
            y = u
    if not (np.isfinite(S_new).all() and np.isfinite(y).all()
            and (z_new is None or np.isfinite(z_new).all())):
        raise DivergedState("non-finite fast-weight state")
    return FastWeightState(S_new, z_new), y


def gate_override_hook(config: RuleConfig, params: RuleParams, state: FastWeightState,
                       x, q, k, v, forced_gate) -> tuple[FastWeightState, np.ndarray]:
    """``step`` with the gate (scalar g or matrix G) replaced by ``forced_gate``."""
    if config.rule is RuleKind.ADD:
        raise ConfigError("the add rule has no gate to override")
    return step(config, params, state, x, q, k, v, forced_gate=forced_gate)


@dataclass
class SequenceCache:
    """Everything the backward scan needs; arrays are stored time-major.

    ``S`` holds the state after every step, so its size is O(T d m).
    """

    config: RuleConfig
    X: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    hk: np.ndarray
    hq: np.ndarray
    kt: np.ndarray
    qt: np.ndarray
    sk: np.ndarray | None
    sq: np.ndarray | None
    S: np.ndarray
    z: np.ndarray | None
    u: np.ndarray
    n: np.ndarray | None
    Y: np.ndarray
    g: np.ndarray | None = None
    zs: np.ndarray | None = None
    fs: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.S.shape[0]

    @property
    def nbytes(self) -> int:
        total = 0
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                total += value.nbytes
        return total


def _first_bad_t(bad: np.ndarray) -> int | None:
    """First index along axis 0 at which any entry of ``bad`` is set."""
    per_t = bad.reshape(bad.shape[0], -1).any(axis=1)
    hits = np.flatnonzero(per_t)
    return int(hits[0]) if hits.size else None


def scan(config: RuleConfig, params: RuleParams, X: np.ndarray, Q: np.ndarray,
         K: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, SequenceCache]:
    """Run the rule over a whole sequence; inputs are ``(..., T, d)``.

    Semantically this is ``step`` applied from ``init_state`` for t = 0..T-1.
    Only the state recurrence itself is a Python loop; feature maps, gates and
    the readout are vectorized over time.
    """
    params.check(config)
    Q = np.asarray(Q)
    dtype = Q.dtype
    if not (X.shape[-2] == Q.shape[-2] == K.shape[-2] == V.shape[-2]):
        raise DimensionError("X, Q, K, V disagree on sequence length")
    for name, arr in (("Q", Q), ("K", K), ("V", V)):
        if arr.shape[-1] != config.d:
            raise DimensionError(f"{name} has width {arr.shape[-1]}, expected d={config.d}")
    Xt, Qt, Kt, Vt = (np.moveaxis(np.asarray(a), -2, 0) for a in (X, Q, K, V))
    T = Qt.shape[0]
    errors: list[DivergenceError] = []

    with np.errstate(all="ignore"):
        hk, _, sk, kt = _map_keys(config, params, Kt)
        hq, _, sq, qt = _map_keys(config, params, Qt)
        if config.sum_norm:
            eps = config.eps_sum_for(dtype)
            t_bad = _first_bad_t((np.abs(sk) <= eps) | (np.abs(sq) <= eps))
            if t_bad is not None:
                errors.append(NearZeroSum(f"feature sum within {eps:g} of zero", t_bad))

        write = numeric.outer(Vt, kt)
        state_shape = write.shape[1:]
        S = np.zeros(state_shape, dtype=dtype)
        S_all = np.empty((T,) + state_shape, dtype=dtype)
        g = zs = fs = None
        rule = config.rule
        if rule.scalar_gate:
            g = scalar_gate(params, Xt)
            gb = g[..., None, None]
        if rule is RuleKind.ADD:
            for t in range(T):
                S = S + write[t]
                S_all[t] = S
        elif rule is RuleKind.GATED:
            write = (1 - gb) * write
            for t in range(T):
                S = gb[t] * S + write[t]
                S_all[t] = S
        elif rule is RuleKind.DELTA:
            for t in range(T):
                r = Vt[t] - _mv(S, kt[t])
                S = S + gb[t] * numeric.outer(r, kt[t])
                S_all[t] = S
        else:
            zs, fs = gate_factors(params, Xt)
            G = numeric.outer(zs, fs)
            for t in range(T):
                S = G[t] * S + write[t]
                S_all[t] = S

        z_all = n = None
        if config.attention_norm:
            zshape = S_all.shape[:-2] + (config.m,)
            kb = np.broadcast_to(kt, zshape)
            if rule is RuleKind.GATED:
                z_all = np.empty(zshape, dtype=dtype)
                z = np.zeros(zshape[1:], dtype=dtype)
                gz = g[..., None]
                for t in range(T):
                    z = gz[t] * z + (1 - gz[t]) * kb[t]
                    z_all[t] = z
            else:
                z_all = np.cumsum(kb, axis=0)

        u = _mv(S_all, qt)
        if z_all is not None:
            n = _dotlast(z_all, qt)
            eps = config.eps_norm_for(dtype)
            t_bad = _first_bad_t(~(np.abs(n) > eps))
            if t_bad is not None:
                errors.append(NormalizerUnderflow(f"|z . q| <= {eps:g}", t_bad))
            Y = u / n[..., None]
        else:
            Y = u

    bad = ~np.isfinite(S_all).reshape(T, -1).all(axis=1) | ~np.isfinite(Y).reshape(T, -1).all(axis=1)
    t_bad = _first_bad_t(bad)
    if t_bad is not None:
        errors.append(DivergedState("non-finite fast-weight state", t_bad))
    if errors:
        # earliest timestep wins; ties keep the order a single step checks them in
        raise min(errors, key=lambda e: e.t)

    cache = SequenceCache(config=config, X=Xt, Q=Qt, K=Kt, V=Vt, hk=hk, hq=hq, kt=kt, qt=qt,
                          sk=sk, sq=sq, S=S_all, z=z_all, u=u, n=n, Y=Y, g=g, zs=zs, fs=fs)
    return np.moveaxis(Y, 0, -2), cache

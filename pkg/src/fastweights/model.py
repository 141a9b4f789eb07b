"""Decoder-only byte language model with a pluggable token mixer.

The mixer is exact causal softmax attention, windowed local attention, or
one of the recurrent update rules from :mod:`fastweights.rules`. Rule mixers
run the numpy scan inside a ``torch.autograd.Function`` whose backward is the
hand-derived adjoint from :mod:`fastweights.grads`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import erf

from .errors import ConfigError
from .feature_maps import FeatureMapKind
from .grads import FDReport, backward_scan, finite_difference_check
from .numeric import logit
from .rules import FastWeightState, RuleConfig, RuleKind, RuleParams, init_state, scan, step

DELTA_INIT_GATE = 0.007
ADD_VALUE_SCALE = 1.0 / 512


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    ffn_mult: int = 4
    max_T: int = 128
    mixer: str = "softmax"  # softmax | local | rule
    window: int = 32
    rule: RuleConfig | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.mixer not in ("softmax", "local", "rule"):
            raise ConfigError(f"unknown mixer {self.mixer!r}")
        if self.mixer == "rule":
            if self.rule is None:
                raise ConfigError("rule mixer needs a RuleConfig")
            if self.rule.d != self.head_dim:
                raise ConfigError(f"rule d={self.rule.d} must equal head_dim={self.head_dim}")
        if self.mixer == "local" and self.window < 1:
            raise ConfigError("window must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def m(self) -> int | None:
        return self.rule.m if self.rule is not None else None

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def mixer_name(self) -> str:
        if self.mixer == "rule":
            return self.rule.rule.value
        return self.mixer


class RuleScanFunction(torch.autograd.Function):
    """Rule scan on (B, H, T, d) tensors with the analytical backward."""

    @staticmethod
    def forward(ctx, config, names, x, q, k, v, *params):
        np_params = RuleParams(**{n: p.detach().numpy() for n, p in zip(names, params)})
        Y, cache = scan(config, np_params, x.detach().numpy(), q.detach().numpy(),
                        k.detach().numpy(), v.detach().numpy())
        ctx.config, ctx.names, ctx.np_params, ctx.cache = config, names, np_params, cache
        return torch.from_numpy(np.ascontiguousarray(Y))

    @staticmethod
    def backward(ctx, dY):
        b = backward_scan(ctx.config, ctx.np_params, ctx.cache, dY.detach().numpy())
        as_t = lambda a: torch.from_numpy(np.ascontiguousarray(a))
        grads = [as_t(b.params[n]) for n in ctx.names]
        ctx.cache = None
        return (None, None, as_t(b.dX), as_t(b.dQ), as_t(b.dK), as_t(b.dV), *grads)


@dataclass
class KVCache:
    """Growing key/value rows for exact attention during generation."""

    K: np.ndarray  # (H, capacity, d)
    V: np.ndarray
    length: int = 0

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        if self.length == self.K.shape[1]:
            grow = max(1, self.K.shape[1])
            self.K = np.concatenate([self.K, np.empty_like(self.K[:, :grow])], axis=1)
            self.V = np.concatenate([self.V, np.empty_like(self.V[:, :grow])], axis=1)
        self.K[:, self.length] = k
        self.V[:, self.length] = v
        self.length += 1

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        return self.K[:, :self.length], self.V[:, :self.length]

    @property
    def nbytes(self) -> int:
        H, _, d = self.K.shape
        return 2 * self.length * H * d * self.K.itemsize


@dataclass
class RingCache:
    """Fixed window of key/value rows for local attention."""

    K: np.ndarray  # (H, window, d)
    V: np.ndarray
    filled: int = 0
    head: int = 0

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        self.K[:, self.head] = k
        self.V[:, self.head] = v
        self.head = (self.head + 1) % self.K.shape[1]
        self.filled = min(self.filled + 1, self.K.shape[1])

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        return self.K[:, :self.filled], self.V[:, :self.filled]

    @property
    def nbytes(self) -> int:
        H, _, d = self.K.shape
        return 2 * self.filled * H * d * self.K.itemsize


@dataclass
class RuleLayerState:
    state: FastWeightState
    params: RuleParams  # numpy views of the layer parameters

    @property
    def nbytes(self) -> int:
        return self.state.nbytes


def _np_dtype(dtype) -> type:
    """numpy float type for a torch or numpy dtype."""
    return np.float64 if dtype in (torch.float64, np.float64) else np.float32


class StepWeights:
    """Numpy views (not copies) of the parameters a one-token step reads.

    Token-at-a-time generation is dominated by per-call dispatch cost, so the
    step runs in numpy. Copies of a generation state share these views.
    """

    def __init__(self, model: "ByteLM"):
        view = lambda p: p.detach().numpy()
        ln = lambda m: (view(m.weight), view(m.bias), m.eps)
        self.tok_emb = view(model.tok_emb.weight)
        self.pos_emb = view(model.pos_emb.weight)
        self.ln_f = ln(model.ln_f)
        self.blocks = []
        for b in model.blocks:
            up, _, down = b.ffn
            mx = b.mixer
            self.blocks.append({
                "ln1": ln(b.ln1), "ln2": ln(b.ln2),
                "q": view(mx.q_proj.weight), "k": view(mx.k_proj.weight), "v": view(mx.v_proj.weight),
                "o": view(mx.o_proj.weight),
                "up": (view(up.weight), view(up.bias)), "down": (view(down.weight), view(down.bias)),
            })

    def __deepcopy__(self, memo):
        return self


def _np_layer_norm(x: np.ndarray, ln) -> np.ndarray:
    w, b, eps = ln
    n = x.shape[-1]
    c = x - np.add.reduce(x) / n  # ndarray.mean goes through a slow Python wrapper
    return c * (w / np.sqrt(np.dot(c, c) / n + eps)) + b


def _np_gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1 + erf(x * (1 / math.sqrt(2))))


@dataclass
class GenerationState:
    layers: list = field(default_factory=list)
    pos: int = 0
    weights: StepWeights | None = None

    @property
    def nbytes(self) -> int:
        return sum(layer.nbytes for layer in self.layers)


class Mixer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.d_model
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.q_proj = nn.Linear(D, D, bias=False)
        self.k_proj = nn.Linear(D, D, bias=False)
        self.v_proj = nn.Linear(D, D, bias=False)
        self.o_proj = nn.Linear(D, D, bias=False)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        B, T, _ = x.shape
        return x.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)

    def _merge(self, y: torch.Tensor) -> torch.Tensor:
        B, H, T, d = y.shape
        return y.transpose(1, 2).reshape(B, T, H * d)


class AttentionMixer(Mixer):
    """Causal softmax attention; ``window`` restricts it to local attention."""

    def __init__(self, cfg: ModelConfig, window: int | None = None):
        super().__init__(cfg)
        self.window = window

    def forward(self, h: torch.Tensor, want_state: bool = False):
        q, k, v = (self._heads(p(h)) for p in (self.q_proj, self.k_proj, self.v_proj))
        T = h.shape[1]
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        i = torch.arange(T)
        allowed = i[None, :] <= i[:, None]
        if self.window is not None:
            allowed = allowed & (i[:, None] - i[None, :] < self.window)
        scores = scores.masked_fill(~allowed, float("-inf"))
        y = self._merge(torch.softmax(scores, dim=-1) @ v)
        out = self.o_proj(y)
        if not want_state:
            return out
        return out, self.cache_from(k[0], v[0])

    def cache_from(self, k: torch.Tensor, v: torch.Tensor):
        """Generation cache holding the (H, T, d) keys/values of a prefix."""
        k, v = k.numpy(), v.numpy()
        H, T, d = k.shape
        if self.window is None:
            # headroom so the next few appends do not reallocate
            K = np.empty((H, T + 64, d), dtype=k.dtype)
            V = np.empty_like(K)
            K[:, :T], V[:, :T] = k, v
            return KVCache(K, V, T)
        cache = self.new_cache(k.dtype)
        for t in range(max(0, T - self.window), T):
            cache.K[:, t % self.window] = k[:, t]
            cache.V[:, t % self.window] = v[:, t]
        cache.filled = min(T, self.window)
        cache.head = T % self.window
        return cache

    def new_cache(self, dtype):
        H, d = self.n_heads, self.head_dim
        dtype = _np_dtype(dtype)
        if self.window is None:
            return KVCache(np.empty((H, 16, d), dtype=dtype), np.empty((H, 16, d), dtype=dtype))
        return RingCache(np.zeros((H, self.window, d), dtype=dtype), np.zeros((H, self.window, d), dtype=dtype))

    def step(self, h: np.ndarray, cache, w: dict) -> np.ndarray:
        """One token: ``h`` is (D,)."""
        H, d = self.n_heads, self.head_dim
        q = (w["q"] @ h).reshape(H, d, 1)
        cache.append((w["k"] @ h).reshape(H, d), (w["v"] @ h).reshape(H, d))
        K, V = cache.view()
        s = np.matmul(K, q)[..., 0] / math.sqrt(d)
        p = np.exp(s - s.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        return w["o"] @ np.matmul(p[:, None, :], V).reshape(H * d)


class RuleMixer(Mixer):
    """Recurrent fast-weight mixer with one set of rule parameters per head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.rule = cfg.rule
        H = cfg.n_heads
        self.rule_params = nn.ParameterDict({
            name: nn.Parameter(torch.zeros((H,) + shape)) for name, shape in self.rule.param_shapes().items()
        })

    def _names(self) -> tuple[str, ...]:
        return tuple(self.rule_params.keys())

    def numpy_params(self) -> RuleParams:
        return RuleParams(**{n: p.detach().numpy() for n, p in self.rule_params.items()})

    def forward(self, h: torch.Tensor, want_state: bool = False):
        x = self._heads(h)
        q, k, v = (self._heads(p(h)) for p in (self.q_proj, self.k_proj, self.v_proj))
        if not want_state:
            names = self._names()
            y = RuleScanFunction.apply(self.rule, names, x, q, k, v, *(self.rule_params[n] for n in names))
            return self.o_proj(self._merge(y))
        params = self.numpy_params()
        Y, cache = scan(self.rule, params, *(a.detach().numpy() for a in (x, q, k, v)))
        out = self.o_proj(self._merge(torch.from_numpy(np.ascontiguousarray(Y))))
        # time-major cache: last entry is the state after the final token of batch item 0
        z = None if cache.z is None else cache.z[-1][0].copy()
        return out, RuleLayerState(FastWeightState(cache.S[-1][0].copy(), z), params)

    def new_cache(self, dtype):
        return RuleLayerState(init_state(self.rule, (self.n_heads,), _np_dtype(dtype)), self.numpy_params())

    def step(self, h: np.ndarray, layer: RuleLayerState, w: dict) -> np.ndarray:
        H, d = self.n_heads, self.head_dim
        q, k, v = ((w[n] @ h).reshape(H, d) for n in "qkv")
        layer.state, y = step(self.rule, layer.params, layer.state, h.reshape(H, d), q, k, v)
        return w["o"] @ y.reshape(H * d)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        if cfg.mixer == "rule":
            self.mixer = RuleMixer(cfg)
        else:
            self.mixer = AttentionMixer(cfg, cfg.window if cfg.mixer == "local" else None)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        hidden = cfg.ffn_mult * cfg.d_model
        self.ffn = nn.Sequential(nn.Linear(cfg.d_model, hidden), nn.GELU(), nn.Linear(hidden, cfg.d_model))

    def forward(self, x: torch.Tensor, want_state: bool = False):
        if want_state:
            m, st = self.mixer(self.ln1(x), want_state=True)
            x = x + m
            return x + self.ffn(self.ln2(x)), st
        x = x + self.mixer(self.ln1(x))
        return x + self.ffn(self.ln2(x))

    def step(self, x: np.ndarray, layer_state, w: dict) -> np.ndarray:
        x = x + self.mixer.step(_np_layer_norm(x, w["ln1"]), layer_state, w)
        (W_up, b_up), (W_down, b_down) = w["up"], w["down"]
        return x + (W_down @ _np_gelu(W_up @ _np_layer_norm(x, w["ln2"]) + b_up) + b_down)


class ByteLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_T, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.weight.dtype

    def _check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ValueError("token id out of vocabulary")
        if tokens.shape[-1] > self.config.max_T:
            raise ValueError(f"sequence length {tokens.shape[-1]} exceeds max_T={self.config.max_T}")

    def _head(self, x: torch.Tensor) -> torch.Tensor:
        # output projection tied to the input embedding
        return self.ln_f(x) @ self.tok_emb.weight.T

    def hidden(self, tokens: torch.Tensor) -> torch.Tensor:
        """Residual stream after the last block, before the final norm and head."""
        self._check_tokens(tokens)
        T = tokens.shape[1]
        x = self.tok_emb(tokens) + self.pos_emb(torch.arange(T))
        for block in self.blocks:
            x = block(x)
        return x

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """``tokens`` (B, T) -> logits (B, T, vocab)."""
        return self._head(self.hidden(tokens))

    @torch.no_grad()
    def prefill(self, tokens) -> tuple[torch.Tensor, GenerationState]:
        """Batched pass over a prompt that also returns the generation state."""
        tokens = torch.as_tensor(tokens).view(1, -1)
        self._check_tokens(tokens)
        T = tokens.shape[1]
        x = self.tok_emb(tokens) + self.pos_emb(torch.arange(T))
        layers = []
        for block in self.blocks:
            x, st = block(x, want_state=True)
            layers.append(st)
        return self._head(x)[0], GenerationState(layers, T, StepWeights(self))

    def init_generation_state(self) -> GenerationState:
        return GenerationState([b.mixer.new_cache(self.dtype) for b in self.blocks], 0, StepWeights(self))

    def step(self, token: int, state: GenerationState) -> torch.Tensor:
        """Feed one token, returning next-token logits (vocab,)."""
        if state.pos >= self.config.max_T:
            raise ValueError(f"position {state.pos} exceeds max_T={self.config.max_T}")
        if not 0 <= int(token) < self.config.vocab_size:
            raise ValueError("token id out of vocabulary")
        w = state.weights if state.weights is not None else StepWeights(self)
        x = w.tok_emb[int(token)] + w.pos_emb[state.pos]
        for block, layer, bw in zip(self.blocks, state.layers, w.blocks):
            x = block.step(x, layer, bw)
        state.pos += 1
        return torch.from_numpy(w.tok_emb @ _np_layer_norm(x, w.ln_f))


def _init_weights(model: ByteLM, gen: torch.Generator) -> None:
    for name, p in model.named_parameters():
        if "rule_params" in name:
            continue
        if name.endswith("bias"):
            nn.init.zeros_(p)
        elif ".ln" in name or name.startswith("ln_"):
            nn.init.ones_(p)
        else:
            nn.init.normal_(p, 0.0, 0.02, generator=gen)


def build_model(config: ModelConfig, seed: int = 0) -> ByteLM:
    """Deterministically initialized model.

    Rule mixers are built by initializing the attention weights and then
    converting, so they share ``convert_mixer``'s initialization.
    """
    gen = torch.Generator().manual_seed(seed)
    base = ByteLM(config.replace(mixer="softmax", rule=None) if config.mixer == "rule" else config)
    _init_weights(base, gen)
    if config.mixer == "rule":
        return convert_mixer(base, config.rule, seed)
    return base


def _ugi_bias(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform gate initialization: sigma(b) ~ Uniform(0, 1)."""
    u = np.clip(rng.uniform(0.0, 1.0, size=shape), 1e-7, 1 - 1e-7)
    return logit(u)


def convert_mixer(model: ByteLM, target: RuleConfig, seed: int = 0) -> ByteLM:
    """Swap every softmax mixer for ``target``'s rule, keeping the projections.

    New parameters: feature-map weights ~ N(0, 1/d) with zero bias; decay
    gates get N(0, 1/d) weights and UGI biases, and each W_v row is scaled by
    ``1 - sigma(b_z)``; the delta gate starts at 0.007 with zero weights; the
    add rule without a learned nonlinearity scales W_v by 1/512.
    """
    cfg = model.config
    if cfg.mixer != "softmax":
        raise ConfigError("convert_mixer expects a softmax-attention model")
    new_cfg = cfg.replace(mixer="rule", rule=target)
    rng = np.random.default_rng(seed)
    dtype = model.dtype
    out = ByteLM(new_cfg).to(dtype)
    state = {k: v for k, v in model.state_dict().items()}
    missing, unexpected = out.load_state_dict(state, strict=False)
    assert not unexpected and all("rule_params" in k for k in missing)

    H, d, m = cfg.n_heads, cfg.head_dim, target.m
    std = 1.0 / math.sqrt(d)
    for block in out.blocks:
        mixer: RuleMixer = block.mixer
        new = {}
        if target.feature_map.needs_weight:
            new["W_phi"] = rng.normal(0.0, std, size=(H, m, d))
        if target.feature_map.needs_bias:
            new["b_phi"] = np.zeros((H, m))
        if target.rule is RuleKind.DECAY:
            new["W_z"] = rng.normal(0.0, std, size=(H, d, d))
            new["b_z"] = _ugi_bias(rng, (H, d))
            new["W_f"] = rng.normal(0.0, std, size=(H, m, d))
            new["b_f"] = _ugi_bias(rng, (H, m))
        elif target.rule is RuleKind.DELTA:
            new["w_g"] = np.zeros((H, d))
            new["b_g"] = np.full((H,), logit(DELTA_INIT_GATE))
        elif target.rule is RuleKind.GATED:
            new["w_g"] = rng.normal(0.0, std, size=(H, d))
            new["b_g"] = _ugi_bias(rng, (H,))
        with torch.no_grad():
            for name, value in new.items():
                mixer.rule_params[name].copy_(torch.from_numpy(value))
            W_v = mixer.v_proj.weight  # (out, in); head h owns rows h*d:(h+1)*d
            if target.rule is RuleKind.DECAY:
                scale = 1 - torch.sigmoid(mixer.rule_params["b_z"])
                W_v.mul_(scale.reshape(H * d, 1))
            elif target.rule is RuleKind.ADD and target.feature_map in (FeatureMapKind.IDENTITY,
                                                                         FeatureMapKind.LINEAR):
                W_v.mul_(ADD_VALUE_SCALE)
    return out


def forward_lm(model: ByteLM, tokens, targets=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Teacher-forced logits and mean next-token cross-entropy.

    With ``targets`` omitted, ``tokens`` has length T + 1: the first T are
    inputs and the last T are targets.
    """
    tokens = torch.as_tensor(tokens)
    squeeze = tokens.dim() == 1
    if squeeze:
        tokens = tokens[None]
    if targets is None:
        inputs, targets = tokens[:, :-1], tokens[:, 1:]
    else:
        inputs = tokens
        targets = torch.as_tensor(targets).view(inputs.shape)
    if targets.numel() and (targets.min() < 0 or targets.max() >= model.config.vocab_size):
        raise ValueError("token id out of vocabulary")
    logits = model(inputs)
    loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))
    return (logits[0] if squeeze else logits), loss


@torch.no_grad()
def generate(model: ByteLM, prompt, n_tokens: int, temperature: float = 0.0,
             seed: int | None = None, return_logits: bool = False):
    """Autoregressive sampling with constant-size state for rule mixers.

    ``temperature == 0`` is greedy. Returns prompt + generated tokens, and
    optionally the logits that produced each generated token.
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must be non-empty")
    gen = torch.Generator().manual_seed(0 if seed is None else seed)
    logits, state = model.prefill(prompt)
    last = logits[-1]
    out, seen = list(prompt), []
    for i in range(n_tokens):
        seen.append(last)
        if temperature <= 0:
            tok = int(torch.argmax(last))
        else:
            probs = torch.softmax(last.double() / temperature, dim=-1)
            tok = int(torch.multinomial(probs, 1, generator=gen))
        out.append(tok)
        if i + 1 < n_tokens:
            last = model.step(tok, state)
    if return_logits:
        return out, torch.stack(seen) if seen else torch.empty(0, model.config.vocab_size)
    return out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def gradcheck_lm(rule: RuleConfig, seed: int = 0, T: int = 8, batch: int = 2, n_layers: int = 1,
                 eps: float = 1e-5) -> FDReport:
    """Finite-difference check of a whole rule-mixer LM microbatch in double.

    The loss is a fixed random linear functional of the residual stream after
    the last block, so the LM head does not enter. Weights are redrawn at
    ``1/sqrt(fan_in)`` scale: at the 0.02 training init the gate gradients sit
    near 1e-7 and double-precision differences cannot resolve them.
    Checked: every block parameter and the positional embedding.
    """
    H = 2
    cfg = ModelConfig(d_model=H * rule.d, n_heads=H, n_layers=n_layers, max_T=T,
                      mixer="rule", rule=rule)
    model = build_model(cfg, seed).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            noise = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            if p.ndim >= 2:
                p.copy_(noise / math.sqrt(p.shape[-1]))
            else:
                p.copy_(0.5 * noise + (1.0 if ".ln" in name or name.startswith("ln") else 0.0))
            if "rule_params.W_phi" in name or ".q_proj." in name or ".k_proj." in name:
                # short mapped keys keep the delta recurrence contractive
                p.mul_(0.5)
    tokens = torch.randint(0, cfg.vocab_size, (batch, T), generator=gen)
    weights = torch.randn(batch, T, cfg.d_model, generator=gen, dtype=torch.float64)

    loss = (model.hidden(tokens) * weights).sum()
    model.zero_grad()
    loss.backward()
    named = dict(model.named_parameters())
    names = [n for n in named if n.startswith("blocks.") or n == "pos_emb.weight"]
    theta = {n: named[n].detach().numpy().copy() for n in names}
    analytic = {n: named[n].grad.numpy().copy() for n in names}

    def loss_fn(values):
        with torch.no_grad():
            for n, v in values.items():
                named[n].copy_(torch.from_numpy(v))
            return (model.hidden(tokens) * weights).sum().item()

    return finite_difference_check(loss_fn, theta, analytic, eps=eps)


# ---------------------------------------------------------------- checkpoints

_FORMAT = "fastweights-checkpoint-v1"


def _config_items(cfg: ModelConfig) -> list[tuple[str, str]]:
    items = []
    for k, v in asdict(cfg).items():
        if k == "rule":
            continue
        items.append((f"config.{k}", str(v)))
    if cfg.rule is not None:
        for k, v in asdict(cfg.rule).items():
            v = v.value if hasattr(v, "value") else v
            items.append((f"rule.{k}", str(v)))
    return items


def _parse_value(text: str):
    if text == "None":
        return None
    if text in ("True", "False"):
        return text == "True"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def save_checkpoint(model: ByteLM, path) -> None:
    """Write ``manifest.txt`` and ``weights.bin`` (little-endian float32) under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"format={_FORMAT}"]
    lines += [f"{k}={v}" for k, v in _config_items(model.config)]
    offset = 0
    blobs = []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"tensor={name}|{shape}|{offset}")
        blobs.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    (path / "weights.bin").write_bytes(b"".join(blobs))


def load_checkpoint(path) -> ByteLM:
    path = Path(path)
    cfg_kw, rule_kw, tensors = {}, {}, []
    for line in (path / "manifest.txt").read_text().splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        if key == "format":
            if value != _FORMAT:
                raise ValueError(f"unknown checkpoint format {value!r}")
        elif key.startswith("config."):
            cfg_kw[key[7:]] = _parse_value(value)
        elif key.startswith("rule."):
            rule_kw[key[5:]] = _parse_value(value)
        elif key == "tensor":
            name, shape, offset = value.split("|")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            tensors.append((name, dims, int(offset)))
    rule = RuleConfig(**rule_kw) if rule_kw else None
    model = ByteLM(ModelConfig(**cfg_kw, rule=rule))
    blob = (path / "weights.bin").read_bytes()
    state = {}
    for name, dims, offset in tensors:
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(dims)
        state[name] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state, strict=True)
    return model

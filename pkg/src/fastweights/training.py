"""Training loop: Adam, global-norm clipping, warmup + cosine schedule."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import CorpusSplits
from .errors import ConfigError, DivergenceError
from .model import ByteLM, forward_lm

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    seq_len: int = 128
    steps: int = 2000
    lr: float = 3e-4
    warmup_steps: int = 100
    schedule: str = "cosine"  # constant | cosine
    min_lr: float = 1e-5
    clip_norm: float = 1.0
    eval_every: int = 200
    eval_tokens: int = 16384  # cap on validation tokens per periodic eval
    seed: int = 0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0")
        if self.warmup_steps > self.steps:
            raise ConfigError("warmup_steps must not exceed steps")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.seq_len < 1 or self.eval_every < 1:
            raise ConfigError("batch_size, seq_len and eval_every must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


# Full-scale recipes, kept for reference; desk runs use the defaults above.
RECIPES = {
    "pile-appendix-a": TrainConfig(batch_size=32, seq_len=1024, steps=100_000, lr=6e-4, warmup_steps=0,
                                   schedule="constant", clip_norm=1.0, eval_every=4000),
    "wt103-appendix-b": TrainConfig(batch_size=26, seq_len=512, steps=100_000, lr=1e-4, warmup_steps=4000,
                                    schedule="cosine", min_lr=2e-6, clip_norm=0.1, eval_every=4000),
}


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant":
        return cfg.lr
    progress = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1 + math.cos(math.pi * min(progress, 1.0)))


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    evals: list[tuple[int, float, float]] = field(default_factory=list)  # (step, loss, ppl)
    best_valid_loss: float = math.inf
    best_valid_ppl: float = math.inf
    diverged: bool = False
    diverged_step: int | None = None
    diverged_reason: str | None = None
    wall_ms: list[float] = field(default_factory=list)

    def to_jsonl(self, path, wall_time: bool = False) -> None:
        """Line-delimited records. ``wall_ms`` is null unless ``wall_time``, so
        reports from identical seeded runs are byte-identical."""
        with open(path, "w") as fh:
            for rec in self.records:
                rec = dict(rec)
                if not wall_time:
                    rec["wall_ms"] = None
                fh.write(json.dumps(rec) + "\n")

    @staticmethod
    def read_jsonl(path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


def _ppl(loss: float) -> float:
    return math.exp(loss) if loss < 700 else math.inf


@torch.no_grad()
def evaluate_perplexity(model: ByteLM, tokens, context: int = 0, block: int | None = None,
                        batch_size: int = 8) -> float:
    """Perplexity over ``tokens`` scoring every token after the first once.

    Targets are taken in blocks of ``block``; each block is fed together with
    up to ``context`` preceding tokens that are not scored. ``context=0``
    evaluates blocks independently.
    """
    return math.exp(evaluate_nll(model, tokens, context, block, batch_size))


@torch.no_grad()
def evaluate_nll(model: ByteLM, tokens, context: int = 0, block: int | None = None,
                 batch_size: int = 8) -> float:
    tokens = np.asarray(tokens, dtype=np.int64)
    if context < 0:
        raise ValueError("context must be >= 0")
    if len(tokens) < 2:
        raise ValueError("split is empty")
    max_T = model.config.max_T
    if block is None:
        block = max_T - context
    if block < 1 or block + context > max_T:
        raise ValueError(f"block={block} + context={context} exceeds max_T={max_T}")

    chunks = []
    for s in range(1, len(tokens), block):
        e = min(s + block, len(tokens))
        lo = max(0, s - 1 - context)
        chunks.append((tokens[lo:e - 1], tokens[s:e]))

    total, count = 0.0, 0
    i = 0
    while i < len(chunks):
        # batch consecutive chunks of identical shape
        j = i + 1
        while j < len(chunks) and j - i < batch_size and chunks[j][0].shape == chunks[i][0].shape \
                and chunks[j][1].shape == chunks[i][1].shape:
            j += 1
        inp = torch.from_numpy(np.stack([c[0] for c in chunks[i:j]]))
        tgt = torch.from_numpy(np.stack([c[1] for c in chunks[i:j]]))
        logits = model(inp)[:, -tgt.shape[1]:]
        nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), reduction="none")
        total += float(nll.double().sum())
        count += tgt.numel()
        i = j
    return total / count


def clip_gradients(params, clip_norm: float) -> float:
    """Scale gradients in place to global L2 norm <= ``clip_norm``; returns the norm before clipping."""
    return float(torch.nn.utils.clip_grad_norm_(params, clip_norm))


def sample_batch(tokens: np.ndarray, batch_size: int, seq_len: int, rng: np.random.Generator):
    if len(tokens) < seq_len + 1:
        raise ValueError(f"split of {len(tokens)} tokens is shorter than seq_len + 1")
    starts = rng.integers(0, len(tokens) - seq_len, size=batch_size)
    idx = starts[:, None] + np.arange(seq_len + 1)
    window = torch.from_numpy(tokens[idx])
    return window[:, :-1], window[:, 1:]


def train(model: ByteLM, data: CorpusSplits, cfg: TrainConfig, log=None) -> TrainReport:
    """Optimize ``model`` in place; divergence ends the run and is reported."""
    if len(data.train) == 0 or len(data.valid) == 0:
        raise ValueError("train and valid splits must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    report = TrainReport()
    valid = data.valid[: cfg.eval_tokens]

    def diverge(step: int, reason: str) -> None:
        report.diverged, report.diverged_step, report.diverged_reason = True, step, reason
        report.records.append({"step": step, "split": "diverged", "loss": None, "ppl": None,
                               "lr": None, "wall_ms": None, "reason": reason})
        if log:
            log(f"step {step}: diverged ({reason})")

    model.train()
    for step in range(cfg.steps):
        lr = lr_at(step, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        x, y = sample_batch(data.train, cfg.batch_size, cfg.seq_len, rng)
        t0 = time.perf_counter()
        try:
            _, loss = forward_lm(model, x, y)
            value = loss.item()
            if not math.isfinite(value):
                diverge(step, "non-finite loss")
                break
            opt.zero_grad(set_to_none=True)
            loss.backward()
            gnorm = clip_gradients(params, cfg.clip_norm)
            if not math.isfinite(gnorm):
                diverge(step, "non-finite gradient")
                break
            opt.step()
        except DivergenceError as exc:
            diverge(step, f"{type(exc).__name__}: {exc}")
            break
        wall = (time.perf_counter() - t0) * 1e3
        report.train_losses.append(value)
        report.wall_ms.append(wall)
        report.records.append({"step": step, "split": "train", "loss": value, "ppl": _ppl(value),
                               "lr": lr, "wall_ms": wall})

        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            try:
                vloss = evaluate_nll(model, valid, context=0, block=cfg.seq_len)
            except DivergenceError as exc:
                diverge(step, f"{type(exc).__name__}: {exc}")
                break
            if not math.isfinite(vloss):
                diverge(step, "non-finite validation loss")
                break
            report.evals.append((step, vloss, _ppl(vloss)))
            report.records.append({"step": step, "split": "valid", "loss": vloss, "ppl": _ppl(vloss),
                                   "lr": lr, "wall_ms": None})
            if vloss < report.best_valid_loss:
                report.best_valid_loss, report.best_valid_ppl = vloss, _ppl(vloss)
            if log:
                log(f"step {step + 1}: train {value:.4f} valid {vloss:.4f} ppl {_ppl(vloss):.2f}")
    model.eval()
    return report

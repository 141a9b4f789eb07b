"""Per-token generation latency and live state bytes as the context grows."""

from __future__ import annotations

import copy
import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .feature_maps import FeatureMapKind
from .model import ByteLM, ModelConfig, build_model
from .rules import RuleConfig, RuleKind

CSV_HEADER = ("mixer", "seq_len", "per_token_latency_s", "live_bytes", "repeats")
FLOAT_BYTES = 4

# the benchmark model: 2 layers, d_model 128, 4 heads of width 32
BENCH_D_MODEL = 128
BENCH_HEADS = 4
BENCH_LAYERS = 2
BENCH_M = 32


@dataclass(frozen=True)
class BenchRecord:
    mixer: str
    seq_len: int
    per_token_latency_s: float
    live_bytes: int
    repeats: int


def bench_rule_config(mixer: str, d: int, m: int = BENCH_M) -> RuleConfig | None:
    """Rule used for a benchmark mixer name (None for attention mixers)."""
    if mixer in ("softmax", "local"):
        return None
    kind = RuleKind(mixer)
    if kind is RuleKind.DELTA:
        # strictly positive map so sum normalization never meets a zero sum
        return RuleConfig(kind, d=d, m=d, feature_map=FeatureMapKind.ELU1, sum_norm=True)
    return RuleConfig(kind, d=d, m=m, feature_map=FeatureMapKind.LINEAR)


def bench_model_config(mixer: str, max_T: int, m: int = BENCH_M) -> ModelConfig:
    d = BENCH_D_MODEL // BENCH_HEADS
    rule = bench_rule_config(mixer, d, m)
    return ModelConfig(d_model=BENCH_D_MODEL, n_heads=BENCH_HEADS, n_layers=BENCH_LAYERS, max_T=max_T,
                       mixer="rule" if rule is not None else mixer, rule=rule)


def default_model_factory(seed: int = 0) -> Callable[[str, int], ByteLM]:
    def factory(mixer: str, max_T: int) -> ByteLM:
        return build_model(bench_model_config(mixer, max_T), seed).eval()
    return factory


def live_bytes(config: ModelConfig, seq_len: int, itemsize: int = FLOAT_BYTES) -> int:
    """Bytes of every state buffer the step at position ``seq_len`` reads.

    softmax: ``T * 2 * d * heads * layers``; local: same with T capped at the
    window; rules: ``layers * heads * (d*m + m if normalized)``.
    """
    H, d, L = config.n_heads, config.head_dim, config.n_layers
    if config.mixer == "softmax":
        return seq_len * 2 * d * H * L * itemsize
    if config.mixer == "local":
        return min(seq_len, config.window) * 2 * d * H * L * itemsize
    rc = config.rule
    per_head = rc.d * rc.m + (rc.m if rc.attention_norm else 0)
    return L * H * per_head * itemsize


def prefix_state(model: ByteLM, seq_len: int, seed: int = 0):
    """Next token and the generation state after a random prefix of ``seq_len - 1`` tokens."""
    rng = np.random.default_rng(seed)
    prefix = rng.integers(0, model.config.vocab_size, size=seq_len - 1).tolist()
    token = int(rng.integers(model.config.vocab_size))
    if prefix:
        _, state = model.prefill(prefix)
    else:
        state = model.init_generation_state()
    return token, state


def timed_step(model: ByteLM, token: int, state) -> float:
    st = copy.deepcopy(state)  # each run extends the same prefix
    t0 = time.perf_counter()
    model.step(token, st)
    return time.perf_counter() - t0


def time_next_token(model: ByteLM, seq_len: int, repeats: int, warmup: int, seed: int = 0) -> float:
    """Median wall time of one step after a prefix of ``seq_len - 1`` tokens."""
    token, state = prefix_state(model, seq_len, seed)
    times = [timed_step(model, token, state) for _ in range(warmup + repeats)]
    return statistics.median(times[warmup:])


def bench_generation(model_factory: Callable[[str, int], ByteLM], mixers, lengths, repeats: int = 5,
                     warmup: int = 2, seed: int = 0, log=None) -> list[BenchRecord]:
    """Time the next-token step for each mixer at each context length.

    Runs single-threaded. ``model_factory(mixer, max_T)`` builds the model.
    Within a mixer, runs are interleaved across lengths (one step at every
    length per round) so slow drift in machine speed cancels out of the
    length-to-length ratios.
    """
    lengths = [int(t) for t in lengths]
    if lengths != sorted(lengths) or not lengths or lengths[0] < 1:
        raise ValueError("lengths must be positive and ascending")
    if repeats < 5:
        raise ValueError("repeats must be >= 5")
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    records = []
    try:
        for mixer in mixers:
            model = model_factory(mixer, max(lengths))
            prepared = [prefix_state(model, T, seed) for T in lengths]
            times = [[] for _ in lengths]
            for i in range(warmup + repeats):
                for j, (token, state) in enumerate(prepared):
                    elapsed = timed_step(model, token, state)
                    if i >= warmup:
                        times[j].append(elapsed)
            for T, ts in zip(lengths, times):
                latency = statistics.median(ts)
                rec = BenchRecord(mixer, T, latency, live_bytes(model.config, T), repeats)
                records.append(rec)
                if log:
                    log(f"{mixer} T={T}: {latency * 1e6:.1f} us/token, {rec.live_bytes} bytes")
    finally:
        torch.set_num_threads(threads)
    return sort_records(records)


def sort_records(records) -> list[BenchRecord]:
    return sorted(records, key=lambda r: (r.mixer, r.seq_len))


def emit_csv(records, path) -> Path:
    records = list(records)
    if not records:
        raise ValueError("no records to write")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in sort_records(records):
            writer.writerow([r.mixer, r.seq_len, repr(r.per_token_latency_s), r.live_bytes, r.repeats])
    return path


def read_csv(path) -> list[BenchRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [BenchRecord(r["mixer"], int(r["seq_len"]), float(r["per_token_latency_s"]),
                        int(r["live_bytes"]), int(r["repeats"])) for r in rows]


def write_sidecar(path, factory_configs: dict[str, ModelConfig]) -> Path:
    """JSON next to the CSV describing the model shape behind each mixer."""
    path = Path(path)
    side = path.with_suffix(path.suffix + ".json")
    meta = {"batch": 1, "dtype": "float32", "threads": 1, "models": {}}
    for mixer, cfg in factory_configs.items():
        entry = asdict(cfg)
        entry["rule"] = None if cfg.rule is None else {k: str(getattr(v, "value", v))
                                                       for k, v in asdict(cfg.rule).items()}
        meta["models"][mixer] = entry
    side.write_text(json.dumps(meta, indent=2, default=str) + "\n")
    return side

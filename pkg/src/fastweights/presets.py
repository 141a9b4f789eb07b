"""Named desk-scale experiments and the rule x configuration ablation grid."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace

from .data import CorpusSplits
from .errors import ConfigError
from .feature_maps import FeatureMapKind
from .model import ModelConfig, build_model
from .rules import RuleConfig, RuleKind
from .training import TrainConfig, TrainReport, train

# 2 layers, 2 heads of width 32: small enough for 2000 CPU steps in about a minute
DESK_MODEL = ModelConfig(d_model=64, n_heads=2, n_layers=2, max_T=64)
DESK_TRAIN = TrainConfig(batch_size=8, seq_len=64, steps=2000, lr=1e-3, warmup_steps=100,
                         schedule="cosine", min_lr=1e-5, clip_norm=1.0, eval_every=500,
                         eval_tokens=8192)
DESK_M = 4

TABLE1_RULES = ("add", "delta", "gated", "decay")
TABLE1_COLUMNS = ("baseline", "norm-off", "phi-off")
EXPECT_UNSTABLE = "diverge-or-degrade"

# cells reported as divergent at full scale
_UNSTABLE_CELLS = {("add", "norm-off"), ("delta", "phi-off"), ("gated", "baseline")}


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    model: ModelConfig
    train: TrainConfig
    expect: str | None = None
    note: str = ""

    @property
    def rule(self) -> RuleConfig | None:
        return self.model.rule

    def with_overrides(self, **train_changes) -> "ExperimentSpec":
        return replace(self, train=self.train.replace(**train_changes)) if train_changes else self


def table1_rule_config(rule: str, column: str, d: int, m: int = DESK_M) -> RuleConfig | None:
    """Rule configuration for one grid cell, or None for the decay + norm cell.

    baseline: ReLU map + attention normalization; norm-off: ReLU map only;
    phi-off: linear projection, no normalization. Delta keeps sum
    normalization in every cell.
    """
    if rule not in TABLE1_RULES or column not in TABLE1_COLUMNS:
        raise ConfigError(f"no grid cell ({rule}, {column})")
    if rule == "decay" and column == "baseline":
        return None
    kind = FeatureMapKind.LINEAR if column == "phi-off" else FeatureMapKind.RELU
    return RuleConfig(RuleKind(rule), d=d, m=m, feature_map=kind,
                      attention_norm=column == "baseline", sum_norm=rule == "delta")


def _rule_spec(name: str, rc: RuleConfig, expect=None, note="") -> ExperimentSpec:
    return ExperimentSpec(name, DESK_MODEL.replace(mixer="rule", rule=rc), DESK_TRAIN, expect, note)


def _build_presets() -> dict[str, ExperimentSpec]:
    d = DESK_MODEL.head_dim
    out = {}
    for rule in TABLE1_RULES:
        for column in TABLE1_COLUMNS:
            rc = table1_rule_config(rule, column, d)
            if rc is None:
                continue
            expect = EXPECT_UNSTABLE if (rule, column) in _UNSTABLE_CELLS else None
            out[f"table1-{rule}-{column}"] = _rule_spec(f"table1-{rule}-{column}", rc, expect)
    # the extra probe behind the "positive maps only matter with normalization" remark
    probe = RuleConfig(RuleKind.ADD, d=d, m=DESK_M, feature_map=FeatureMapKind.LINEAR, attention_norm=True)
    out["probe-add-norm-phi-off"] = _rule_spec("probe-add-norm-phi-off", probe, EXPECT_UNSTABLE,
                                               "outside the grid")
    out["table2-gpt2"] = ExperimentSpec("table2-gpt2", DESK_MODEL.replace(mixer="softmax"), DESK_TRAIN)
    out["table2-local-attention"] = ExperimentSpec(
        "table2-local-attention", DESK_MODEL.replace(mixer="local", window=32), DESK_TRAIN)
    for m in (16, 32):
        for rule in ("gated", "decay"):
            rc = RuleConfig(RuleKind(rule), d=d, m=m, feature_map=FeatureMapKind.LINEAR)
            out[f"table2-{rule}-m{m}"] = _rule_spec(f"table2-{rule}-m{m}", rc)
    return out


PRESETS: dict[str, ExperimentSpec] = _build_presets()


def resolve_preset(name: str) -> ExperimentSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}") from None


@dataclass
class ExperimentResult:
    name: str
    seed: int
    diverged: bool
    best_valid_loss: float
    best_valid_ppl: float
    diverged_step: int | None
    report: TrainReport

    @property
    def outcome(self) -> str:
        return "DIVERGED" if self.diverged else f"{self.best_valid_ppl:.2f}"


def run_experiment(spec: ExperimentSpec, data: CorpusSplits, seed: int = 0, log=None) -> ExperimentResult:
    model = build_model(spec.model, seed)
    report = train(model, data, spec.train.replace(seed=seed), log=log)
    return ExperimentResult(spec.name, seed, report.diverged, report.best_valid_loss,
                            report.best_valid_ppl, report.diverged_step, report)


@dataclass
class AblationTable:
    """Outcome per (rule, column): a perplexity string, ``DIVERGED`` or ``N/A``."""

    cells: dict[tuple[str, str], str]

    def rows(self) -> list[list[str]]:
        return [[rule] + [self.cells[(rule, col)] for col in TABLE1_COLUMNS] for rule in TABLE1_RULES]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["rule", *TABLE1_COLUMNS])
        writer.writerows(self.rows())
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| rule | " + " | ".join(TABLE1_COLUMNS) + " |",
                 "|---" * (len(TABLE1_COLUMNS) + 1) + "|"]
        lines += ["| " + " | ".join(row) + " |" for row in self.rows()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "AblationTable":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if tuple(header[1:]) != TABLE1_COLUMNS:
            raise ValueError(f"unexpected header {header}")
        return cls({(row[0], col): val for row in body for col, val in zip(header[1:], row[1:])})

    @classmethod
    def from_markdown(cls, text: str) -> "AblationTable":
        rows = [[c.strip() for c in line.strip().strip("|").split("|")]
                for line in text.splitlines() if line.startswith("|") and not line.startswith("|---")]
        header, body = rows[0], rows[1:]
        return cls({(row[0], col): val for row in body for col, val in zip(header[1:], row[1:])})


def grid_presets() -> list[str]:
    return [f"table1-{r}-{c}" for r in TABLE1_RULES for c in TABLE1_COLUMNS]


def run_ablation_grid(corpus: CorpusSplits, presets: list[str] | None = None, seed: int = 0,
                      log=None, **train_overrides) -> tuple[AblationTable, list[ExperimentResult]]:
    """Train every runnable grid cell once; the decay + norm cell is ``N/A``.

    ``presets`` restricts which cells run (the rest are left blank as ``-``).
    ``train_overrides`` are applied to each preset's TrainConfig.
    """
    names = grid_presets() if presets is None else list(presets)
    wanted = set()
    for name in names:
        if name == "table1-decay-baseline":
            continue
        spec = resolve_preset(name)  # unknown names fail before anything runs
        if not name.startswith("table1-"):
            raise ConfigError(f"{name} is not a grid cell")
        wanted.add(spec.name)
    cells, results = {}, []
    for rule in TABLE1_RULES:
        for col in TABLE1_COLUMNS:
            name = f"table1-{rule}-{col}"
            if rule == "decay" and col == "baseline":
                cells[(rule, col)] = "N/A"
                continue
            if name not in wanted:
                cells[(rule, col)] = "-"
                continue
            spec = resolve_preset(name).with_overrides(**train_overrides)
            res = run_experiment(spec, corpus, seed, log=log)
            if log:
                log(f"{name}: {res.outcome}" + (f" (expect: {spec.expect})" if spec.expect else ""))
            cells[(rule, col)] = res.outcome
            results.append(res)
    return AblationTable(cells), results


def mean_best_loss(results: list[ExperimentResult]) -> float:
    """Mean best validation loss; a diverged run counts as +inf."""
    return sum(r.best_valid_loss if not r.diverged else math.inf for r in results) / len(results)


TRAINABILITY_PRESETS = ("table1-decay-phi-off", "table1-add-phi-off", "table2-decay-m32")


def run_trainability(corpus: CorpusSplits, seeds=(0, 1, 2), log=None, **train_overrides) -> dict:
    """Decay vs add at m=4 and decay at m=4 vs m=32, each over ``seeds``.

    Returns per-preset results plus the two mean-loss comparisons.
    """
    runs = {name: [run_experiment(resolve_preset(name).with_overrides(**train_overrides), corpus, s, log=log)
                   for s in seeds]
            for name in TRAINABILITY_PRESETS}
    means = {name: mean_best_loss(rs) for name, rs in runs.items()}
    return {
        "runs": runs,
        "means": means,
        "decay_le_add": means["table1-decay-phi-off"] <= means["table1-add-phi-off"],
        "m32_lt_m4": means["table2-decay-m32"] < means["table1-decay-phi-off"],
    }

"""``fastweights`` command line: train, eval, generate, convert, bench, gradcheck, ablate."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DivergenceError, DimensionError

GRADCHECK_TOL = 1e-5


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Keys use flag names."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--preset", help="named experiment; model/training flags override it")
    g.add_argument("--mixer", choices=["softmax", "local", "add", "gated", "delta", "decay"])
    g.add_argument("--feature-map", choices=["identity", "linear", "relu", "elu1"])
    g.add_argument("--m", type=int, help="feature dimension")
    g.add_argument("--norm", action=argparse.BooleanOptionalAction, default=None,
                   help="attention normalization")
    g.add_argument("--sum-norm", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--d-model", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--layers", type=int)
    g.add_argument("--max-T", dest="max_T", type=int)
    g.add_argument("--window", type=int)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--steps", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--seq-len", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--warmup-steps", type=int)
    g.add_argument("--schedule", choices=["constant", "cosine"])
    g.add_argument("--min-lr", type=float)
    g.add_argument("--clip-norm", type=float)
    g.add_argument("--eval-every", type=int)
    g.add_argument("--eval-tokens", type=int)


def _add_corpus_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", help="text file (default: bundled corpus)")
    p.add_argument("--split-fracs", default="0.9,0.05,0.05")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="fastweights", description=__doc__)
    parser.add_argument("--seed", type=int, default=0, help="the only source of randomness")
    parser.add_argument("--config", help="key=value file of flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["train"] = sub.add_parser("train", help="train a model on a corpus")
    _add_model_flags(p)
    _add_train_flags(p)
    _add_corpus_flags(p)
    p.add_argument("--out", required=True, help="output directory (checkpoint + report.jsonl)")
    p.add_argument("--wall-time", action="store_true", help="record per-step wall time in the report")
    p.add_argument("--quiet", action="store_true")

    p = subs["eval"] = sub.add_parser("eval", help="perplexity of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    _add_corpus_flags(p)
    p.add_argument("--split", choices=["train", "valid", "test"], default="test")
    p.add_argument("--context", type=int, default=0)
    p.add_argument("--block", type=int)
    p.add_argument("--max-tokens", type=int)

    p = subs["generate"] = sub.add_parser("generate", help="sample bytes from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--n-tokens", type=int, default=64)
    p.add_argument("--temperature", type=float, default=0.0)

    p = subs["convert"] = sub.add_parser("convert", help="replace softmax attention by an update rule")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rule", required=True, choices=["add", "gated", "delta", "decay"])
    p.add_argument("--feature-map", default="linear", choices=["identity", "linear", "relu", "elu1"])
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--norm", action="store_true")
    p.add_argument("--sum-norm", action="store_true")
    p.add_argument("--out", required=True)

    p = subs["bench"] = sub.add_parser("bench", help="per-token generation latency vs context length")
    p.add_argument("--mixers", default="decay,delta,softmax")
    p.add_argument("--lengths", default="256,512,1024,2048,4096")
    p.add_argument("--repeats", type=int, default=9)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--out", required=True)

    p = subs["gradcheck"] = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--rule", required=True, choices=["add", "gated", "delta", "decay"])
    p.add_argument("--precision", choices=["single", "double"], default="double")
    p.add_argument("--seeds", type=int, default=5, help="seeds per configuration, from --seed")
    p.add_argument("--T", type=int, default=8)
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--lm", action="store_true", help="check a whole-LM microbatch instead")

    p = subs["ablate"] = sub.add_parser("ablate", help="rule x configuration grid")
    p.add_argument("--presets", help="comma list of grid presets (default: all cells)")
    _add_train_flags(p)
    _add_corpus_flags(p)
    p.add_argument("--out", required=True, help="output prefix; writes PREFIX.csv and PREFIX.md")
    p.add_argument("--quiet", action="store_true")
    return parser, subs


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config_file(args.config)
        target = subs[args.command]
        known = {a.dest for a in target._actions} | {a.dest for a in parser._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            parser.error(f"unknown keys in {args.config}: {', '.join(unknown)}")
        # file values become defaults; explicit flags still win
        typed = {}
        for action in target._actions + parser._actions:
            if action.dest in values:
                raw = values[action.dest]
                if isinstance(action, argparse.BooleanOptionalAction) or action.type is None and \
                        isinstance(action.default, bool):
                    typed[action.dest] = raw.lower() in ("1", "true", "yes", "on")
                else:
                    typed[action.dest] = action.type(raw) if action.type else raw
        target.set_defaults(**{k: v for k, v in typed.items() if k in {a.dest for a in target._actions}})
        parser.set_defaults(**{k: v for k, v in typed.items() if k in {a.dest for a in parser._actions}})
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------- helpers

def _corpus(args):
    from .data import load_corpus
    fracs = tuple(float(f) for f in _csv_list(args.split_fracs))
    return load_corpus(args.corpus, fracs, seed=args.seed)


def _experiment(args):
    from .feature_maps import FeatureMapKind
    from .presets import DESK_M, DESK_MODEL, DESK_TRAIN, ExperimentSpec, resolve_preset
    from .rules import RuleConfig, RuleKind

    spec = resolve_preset(args.preset) if args.preset else ExperimentSpec("custom", DESK_MODEL, DESK_TRAIN)
    mc = spec.model
    shape = {k: v for k, v in (("d_model", args.d_model), ("n_heads", args.heads), ("n_layers", args.layers),
                                ("max_T", args.max_T), ("window", args.window)) if v is not None}
    mixer = args.mixer or (mc.mixer_name() if mc.mixer == "rule" else mc.mixer)
    if mixer in ("softmax", "local"):
        mc = mc.replace(mixer=mixer, rule=None, **shape)
    else:
        base = mc.rule
        head_dim = shape.get("d_model", mc.d_model) // shape.get("n_heads", mc.n_heads)
        kind = FeatureMapKind(args.feature_map) if args.feature_map else (
            base.feature_map if base is not None else FeatureMapKind.LINEAR)
        m = args.m if args.m is not None else (base.m if base is not None else DESK_M)
        if kind.square:
            m = head_dim
        norm = args.norm if args.norm is not None else (base.attention_norm if base is not None else False)
        sum_norm = args.sum_norm if args.sum_norm is not None else (
            base.sum_norm if base is not None else mixer == "delta")
        rule = RuleConfig(RuleKind(mixer), d=head_dim, m=m, feature_map=kind, attention_norm=norm,
                          sum_norm=sum_norm)
        mc = mc.replace(mixer="rule", rule=rule, **shape)
    train_changes = {k: getattr(args, k) for k in
                     ("steps", "batch_size", "seq_len", "lr", "warmup_steps", "schedule", "min_lr",
                      "clip_norm", "eval_every", "eval_tokens") if getattr(args, k, None) is not None}
    tc = spec.train.replace(**train_changes, seed=args.seed)
    if tc.seq_len > mc.max_T:
        mc = mc.replace(max_T=tc.seq_len)
    return mc, tc


def _log(args):
    return None if getattr(args, "quiet", False) else (lambda msg: print(msg, file=sys.stderr))


# ---------------------------------------------------------------- subcommands

def cmd_train(args) -> int:
    from .model import build_model, save_checkpoint
    from .training import train

    torch.set_num_threads(1)
    mc, tc = _experiment(args)
    data = _corpus(args)
    model = build_model(mc, args.seed)
    report = train(model, data, tc, log=_log(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_jsonl(out / "report.jsonl", wall_time=args.wall_time)
    save_checkpoint(model, out / "checkpoint")
    if report.diverged:
        print(f"diverged at step {report.diverged_step}: {report.diverged_reason}")
    else:
        print(f"best valid loss {report.best_valid_loss:.6f} ppl {report.best_valid_ppl:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .model import load_checkpoint
    from .training import evaluate_nll

    torch.set_num_threads(1)
    model = load_checkpoint(args.checkpoint).eval()
    tokens = getattr(_corpus(args), args.split)
    if args.max_tokens:
        tokens = tokens[: args.max_tokens]
    nll = evaluate_nll(model, tokens, context=args.context, block=args.block)
    print(f"{args.split} nll {nll:.6f} ppl {np.exp(nll):.4f}")
    return 0


def cmd_generate(args) -> int:
    from .data import detokenize, tokenize
    from .model import generate, load_checkpoint

    model = load_checkpoint(args.checkpoint).eval()
    prompt = tokenize(args.prompt.encode("utf-8")).tolist()
    if not prompt:
        raise ValueError("prompt must be non-empty")
    n = min(args.n_tokens, model.config.max_T - len(prompt) + 1)
    if n < args.n_tokens:
        print(f"note: truncated to {n} tokens by max_T={model.config.max_T}", file=sys.stderr)
    out = generate(model, prompt, n, temperature=args.temperature, seed=args.seed)
    sys.stdout.write(detokenize(out).decode("utf-8", errors="replace") + "\n")
    return 0


def cmd_convert(args) -> int:
    from .feature_maps import FeatureMapKind
    from .model import convert_mixer, load_checkpoint, save_checkpoint
    from .rules import RuleConfig, RuleKind

    model = load_checkpoint(args.checkpoint)
    kind = FeatureMapKind(args.feature_map)
    d = model.config.head_dim
    rule = RuleConfig(RuleKind(args.rule), d=d, m=d if kind.square else args.m, feature_map=kind,
                      attention_norm=args.norm, sum_norm=args.sum_norm)
    save_checkpoint(convert_mixer(model, rule, args.seed), args.out)
    print(f"converted to {args.rule} (m={rule.m}) -> {args.out}")
    return 0


def cmd_bench(args) -> int:
    from .bench import bench_generation, bench_model_config, default_model_factory, emit_csv, write_sidecar

    mixers = _csv_list(args.mixers)
    lengths = sorted(int(t) for t in _csv_list(args.lengths))
    for mx in mixers:
        bench_model_config(mx, max(lengths))  # reject unknown mixers before timing anything
    records = bench_generation(default_model_factory(args.seed), mixers, lengths, args.repeats, args.warmup,
                               seed=args.seed, log=lambda msg: print(msg, file=sys.stderr))
    path = emit_csv(records, args.out)
    write_sidecar(path, {mx: bench_model_config(mx, max(lengths)) for mx in mixers})
    print(f"wrote {len(records)} records to {path}")
    return 0


def cmd_gradcheck(args) -> int:
    from .grads import gradcheck_rule, legal_configs
    from .rules import RuleConfig, RuleKind

    dtype = np.float64 if args.precision == "double" else np.float32
    if args.lm:
        from .model import gradcheck_lm
        if args.precision != "double":
            raise ConfigError("the LM check runs in double precision")
        rule = RuleConfig(RuleKind(args.rule), d=8, m=3, feature_map="linear",
                          sum_norm=args.rule == "delta")
        worst = max((gradcheck_lm(rule, seed, T=args.T) for seed in range(args.seed, args.seed + args.seeds)),
                    key=lambda r: r.max_rel_err)
        print(f"lm {args.rule}: {worst}")
    else:
        configs = [c for c in legal_configs(args.d, args.m) if c.rule is RuleKind(args.rule)]
        worst = None
        for cfg in configs:
            for seed in range(args.seed, args.seed + args.seeds):
                rep = gradcheck_rule(cfg, seed, T=args.T, dtype=dtype)
                if worst is None or rep.max_rel_err > worst.max_rel_err:
                    worst = rep
        print(f"{args.rule} ({len(configs)} configs x {args.seeds} seeds, {args.precision}): {worst}")
    print(f"max_rel_err {worst.max_rel_err:.3e}")
    return 0 if worst.max_rel_err <= GRADCHECK_TOL else 1


def cmd_ablate(args) -> int:
    from .presets import resolve_preset, run_ablation_grid

    torch.set_num_threads(1)
    presets = _csv_list(args.presets) if args.presets else None
    for name in presets or []:
        resolve_preset(name)  # fail at startup, not mid-grid
    overrides = {k: getattr(args, k) for k in
                 ("steps", "batch_size", "seq_len", "lr", "warmup_steps", "schedule", "min_lr",
                  "clip_norm", "eval_every", "eval_tokens") if getattr(args, k, None) is not None}
    if "steps" in overrides and "warmup_steps" not in overrides:
        overrides["warmup_steps"] = min(resolve_preset("table1-decay-phi-off").train.warmup_steps,
                                        overrides["steps"])
    table, _ = run_ablation_grid(_corpus(args), presets, seed=args.seed, log=_log(args), **overrides)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.csv").write_text(table.to_csv())
    Path(f"{prefix}.md").write_text(table.to_markdown())
    sys.stdout.write(table.to_markdown())
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "generate": cmd_generate, "convert": cmd_convert,
            "bench": cmd_bench, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def cli_main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    except (ConfigError, ValueError, OSError) as exc:  # unreadable --config file
        print(f"fastweights: error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DimensionError, DivergenceError, ValueError, OSError) as exc:
        print(f"fastweights {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()

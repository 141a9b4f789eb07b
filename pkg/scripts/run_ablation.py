"""Train every cell of the rule x configuration grid at desk scale and write the table."""

import argparse
from pathlib import Path

import torch

from fastweights.data import load_corpus
from fastweights.presets import run_ablation_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=None, help="override the 2000-step recipe")
    ap.add_argument("--presets", default=None, help="comma list of grid cells (default: all)")
    ap.add_argument("--out", default="ablation", help="prefix for PREFIX.csv and PREFIX.md")
    args = ap.parse_args()
    torch.set_num_threads(1)
    overrides = {"steps": args.steps, "warmup_steps": min(100, args.steps)} if args.steps else {}
    presets = args.presets.split(",") if args.presets else None
    table, _ = run_ablation_grid(load_corpus(), presets, seed=args.seed, log=print, **overrides)
    Path(f"{args.out}.csv").write_text(table.to_csv())
    Path(f"{args.out}.md").write_text(table.to_markdown())
    print(table.to_markdown())


if __name__ == "__main__":
    main()

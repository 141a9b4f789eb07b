"""Decay vs add at m=4, and decay m=4 vs m=32, on the bundled corpus over three seeds."""

import argparse
import json
import time

import torch

from fastweights.data import load_corpus
from fastweights.presets import run_trainability


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default=None, help="write a JSON summary here")
    args = ap.parse_args()
    torch.set_num_threads(1)
    overrides = {"steps": args.steps} if args.steps else {}
    t0 = time.perf_counter()
    res = run_trainability(load_corpus(), seeds=[int(s) for s in args.seeds.split(",")],
                           log=print, **overrides)
    summary = {
        "per_seed": {name: [{"seed": r.seed, "best_valid_loss": r.best_valid_loss, "diverged": r.diverged}
                            for r in rs] for name, rs in res["runs"].items()},
        "means": res["means"],
        "decay_le_add": res["decay_le_add"],
        "m32_lt_m4": res["m32_lt_m4"],
        "wall_s": round(time.perf_counter() - t0, 1),
    }
    print(json.dumps(summary, indent=2))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()

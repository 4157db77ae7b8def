"""Pilot run: train every mask variant at the desk-scale config and record the curves.

Writes ``results/pilot/<variant>/curve.csv`` and ``results/pilot_train.json``. The
summary holds the step-0 and final losses per variant, the relative drop, and the
final-loss ratio against Standard; these are the reference numbers for the
training-parity check.
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from banded_attn import lm
from banded_attn.partition import ALL_VARIANTS

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--corpus", default=str(ROOT / "data" / "tragedies.txt"))
    ap.add_argument("--out", default=str(ROOT / "results"))
    args = ap.parse_args()

    out = Path(args.out)
    corpus = lm.load_corpus(args.corpus)
    summary = {"steps": args.steps, "seed": args.seed, "variants": {}}
    for variant in ALL_VARIANTS:
        cfg = lm.ModelConfig(variant=str(variant), seed=args.seed, steps=args.steps,
                             vocab_size=corpus.vocab_size)
        t0 = time.perf_counter()
        state, curve = lm.train(cfg, corpus)
        wall = time.perf_counter() - t0
        run_dir = out / "pilot" / str(variant)
        run_dir.mkdir(parents=True, exist_ok=True)
        lm.write_curve_csv(curve, run_dir / "curve.csv")
        first, last = curve[0].loss, curve[-1].loss
        summary["variants"][str(variant)] = {
            "initial_loss": first,
            "final_loss": last,
            "relative_drop": 1 - last / first,
            "val_loss": lm.evaluate(state, corpus).loss,
            "wall_s": wall,
        }
        print(f"{str(variant):<14} {first:.4f} -> {last:.4f}  ({wall:.0f}s)", flush=True)
    base = summary["variants"]["Standard"]["final_loss"]
    for rec in summary["variants"].values():
        rec["final_ratio_vs_standard"] = rec["final_loss"] / base
    (out / "pilot_train.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()

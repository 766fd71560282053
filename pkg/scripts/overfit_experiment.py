"""Desk-scale overfit run: coarse then refine on a small synthetic split.

Writes reports and checkpoints under --out and prints the per-group metric
table against the identity-matte (background) baseline.

    python scripts/overfit_experiment.py --samples 50 --epochs 200 --out runs/overfit
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from ctom import synth
from ctom.trainer import TrainConfig, evaluate_split, load_dataset, train_coarse, train_refine


def build_split(out: Path, samples: int, size: int, seed: int) -> Path:
    bg_dir = out / "backgrounds"
    synth.write_procedural_backgrounds(bg_dir, 8, size, size, seed)
    synth.generate_dataset({"train": synth.balanced_counts(samples)}, bg_dir, out / "data", seed, size, size)
    return out / "data" / "manifest.jsonl"


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--samples", type=int, default=50)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--refine-epochs", type=int, default=5)
    ap.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/overfit"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    manifest = build_split(args.out, args.samples, args.size, args.seed)
    data = load_dataset(manifest, "train")
    t0 = time.time()
    coarse, rep = train_coarse(TrainConfig(epochs=args.epochs, learning_rate=args.lr, seed=args.seed), data, checkpoint_dir=args.out)
    print(f"coarse: {time.time() - t0:.0f}s, loss {rep.epochs[0]['loss']:.4f} -> {rep.epochs[-1]['loss']:.4f}")
    coarse_table = evaluate_split(coarse, None, data)
    refine, rrep = train_refine(
        TrainConfig(stage="refine", epochs=args.refine_epochs, learning_rate=args.lr, seed=args.seed), data, coarse, checkpoint_dir=args.out
    )
    table = evaluate_split(coarse, refine, data)
    for name, rows in (("background", table["background"]), ("coarse", coarse_table["model"]), ("refined", table["model"])):
        print(f"== {name}")
        for row in rows:
            print("  " + "  ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    (args.out / "report.json").write_text(
        json.dumps({"coarse": rep.to_dict(), "refine": rrep.to_dict(), "coarse_eval": coarse_table, "eval": table}, indent=2)
    )


if __name__ == "__main__":
    main()

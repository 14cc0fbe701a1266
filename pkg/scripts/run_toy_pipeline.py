"""End-to-end toy run through the command line.

synth -> train-reference (Z epochs) -> encrl (2Z/3) -> finetune (Z/3) -> evaluate,
plus a from-scratch 2-layer baseline trained for Z epochs, with wall times.

    python3 scripts/run_toy_pipeline.py --out runs/toy
"""

import argparse
import time
from pathlib import Path

from encrl.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy.conf"


def step(label: str, *argv) -> float:
    start = time.perf_counter()
    code = main([str(a) for a in argv])
    if code != 0:
        raise SystemExit(f"{label} failed with status {code}")
    elapsed = time.perf_counter() - start
    print(f"[{label}] {elapsed:.1f}s")
    return elapsed


def run() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--items", type=int, default=500)
    ap.add_argument("--test-items", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--reference-seed", type=int, default=100)
    ap.add_argument("--z", type=int, default=30)
    args = ap.parse_args()

    out = Path(args.out)
    data = out / "data"
    common = ["--config", CONFIG, "--train", data / "train.tsv", "--test", data / "test.tsv", "--set", f"z={args.z}"]
    total = step("synth", "synth", "--items", args.items, "--test-items", args.test_items, "--seed", 1, "--out", data)
    total += step("reference", "train-reference", *common, "--out", out, "--layers", 4, "--seed", args.reference_seed)
    ref = out / "reference" / "final.ckpt"
    total += step("encrl", "encrl", *common, "--out", out, "--reference", ref, "--layers", 2, "--seed", args.seed,
                  "--loss", "clip+mse")
    total += step("finetune", "finetune", *common, "--out", out, "--init", out / "encrl" / "final.ckpt",
                  "--layers", 2, "--seed", args.seed)
    total += step("evaluate", "evaluate", "--out", out, "--checkpoint", out / "finetune" / "final.ckpt",
                  "--manifest", data / "test.tsv")
    print(f"pipeline total {total / 60:.1f} min")
    scratch = out / "scratch"
    step("scratch baseline", "train-reference", *common, "--out", scratch, "--layers", 2, "--seed", args.seed)
    step("evaluate scratch", "evaluate", "--out", scratch, "--checkpoint", scratch / "reference" / "final.ckpt",
         "--manifest", data / "test.tsv")


if __name__ == "__main__":
    run()

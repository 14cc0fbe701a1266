"""Magnitude pruning of toy reference models: whole model vs. sparing the conv modules.

    python3 scripts/run_pruning_study.py --out runs/pruning --seeds 100 101 102
"""

import argparse
import dataclasses
from pathlib import Path

from encrl.config import apply_settings, read_config_file
from encrl.evaluation import evaluate
from encrl.frontend import synth_dataset
from encrl.model import magnitude_prune
from encrl.training import TrainConfig, load_data, train_reference

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy.conf"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/pruning")
    ap.add_argument("--seeds", type=int, nargs="+", default=[100, 101, 102, 103, 104])
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.0, 0.05, 0.075, 0.25, 0.5, 0.75, 0.9])
    ap.add_argument("--z", type=int, default=30)
    args = ap.parse_args()

    out = Path(args.out)
    synth_dataset(500, 9, 1, out / "data", n_test=100)
    cfg = apply_settings(TrainConfig(), read_config_file(CONFIG))
    cfg = dataclasses.replace(
        cfg, z=args.z, layers=4, out="",
        train_manifest=str(out / "data" / "train.tsv"), test_manifest=str(out / "data" / "test.tsv"),
    )
    data = load_data(cfg)
    lines = ["seed fraction exclude_conv pruned wer"]
    for seed in args.seeds:
        model = train_reference(dataclasses.replace(cfg, seed=seed), data).model
        for fraction in args.fractions:
            for exclude in (False, True):
                pruned, report = magnitude_prune(model, fraction, exclude_conv=exclude)
                wer = evaluate(pruned, data.test, data.vocab).wer
                lines.append(f"{seed} {fraction} {exclude} {report.n_pruned} {wer:.4f}")
                print(lines[-1], flush=True)
    (out / "pruning.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()

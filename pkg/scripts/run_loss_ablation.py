"""Loss-mode ablation at toy scale: EncRL + finetune once per mode from one reference.

    python3 scripts/run_loss_ablation.py --out runs/ablation
"""

import argparse
import dataclasses
from pathlib import Path

from encrl.cli import format_ablation_table, run_loss_ablation
from encrl.config import apply_settings, read_config_file
from encrl.frontend import synth_dataset
from encrl.training import TrainConfig, load_data, train_reference

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy.conf"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--z", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    synth_dataset(500, 9, 1, out / "data", n_test=100)
    cfg = apply_settings(TrainConfig(), read_config_file(CONFIG))
    cfg = dataclasses.replace(
        cfg, z=args.z, seed=args.seed, out=str(out),
        train_manifest=str(out / "data" / "train.tsv"), test_manifest=str(out / "data" / "test.tsv"),
    )
    data = load_data(cfg)
    reference = train_reference(dataclasses.replace(cfg, layers=4, seed=100), data).model
    table = format_ablation_table(run_loss_ablation(dataclasses.replace(cfg, layers=2), reference))
    (out / "loss_ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")


if __name__ == "__main__":
    main()

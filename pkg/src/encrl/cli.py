"""Command-line entry point: ``encrl <subcommand> [options]``.

Settings are resolved as defaults < ``--config`` file < flags / ``--set key=value``.
Every subcommand echoes its effective configuration under ``<out>/<subcommand>/``
before doing any work and exits with status 2 on configuration or data errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from encrl import autodiff as ad
from encrl.config import apply_settings, format_config, parse_overrides, read_config_file
from encrl.errors import ConfigError, DataError, FormatError, ShapeError
from encrl.evaluation import evaluate
from encrl.frontend import Vocabulary, detokenize, load_wav, mel_spectrogram, synth_dataset
from encrl.losses import ENCRL_MODES, ctc_greedy_decode
from encrl.model import (
    forward_classifier,
    forward_encoder,
    load_checkpoint,
    magnitude_prune,
    save_checkpoint,
)
from encrl.training import TrainConfig, finetune, load_data, read_runlog, train_encrl, train_reference

log = logging.getLogger("encrl")

# WER (%) of a 6-layer model on LibriSpeech test-clean, as published; shown for orientation only.
PUBLISHED_LOSS_ABLATION = {"clip": 9.06, "mae": 6.40, "mse": 6.36, "clip+mae": 6.42, "clip+mse": 6.27}

USER_ERRORS = (ConfigError, DataError, FormatError, ShapeError, FileNotFoundError, NotADirectoryError)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train", dest="train_manifest")
    p.add_argument("--test", dest="test_manifest")
    p.add_argument("--vocab")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="encrl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--items", type=int, default=200)
    p.add_argument("--test-items", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=9)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data")

    p = sub.add_parser("train-reference", help="train the N-layer reference with CTC for Z epochs")
    _common(p)
    _data_flags(p)
    p.add_argument("--layers", type=int)

    p = sub.add_parser("encrl", help="encoder representation learning against a frozen reference")
    _common(p)
    _data_flags(p)
    p.add_argument("--reference", help="reference checkpoint")
    p.add_argument("--layers", type=int)
    p.add_argument("--loss", type=str.lower, choices=ENCRL_MODES)

    p = sub.add_parser("finetune", help="CTC finetuning from an EncRL checkpoint")
    _common(p)
    _data_flags(p)
    p.add_argument("--init", help="EncRL (or any) checkpoint to start from")
    p.add_argument("--layers", type=int)
    p.add_argument("--slice", help="'first', 'last' or comma-separated source block indices")
    p.add_argument("--fresh-head", action="store_true", help="do not reuse the classifier")

    p = sub.add_parser("evaluate", help="greedy-decode a manifest and report WER")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")

    p = sub.add_parser("prune", help="global magnitude pruning, optionally followed by evaluation")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--exclude-conv", action="store_true")
    p.add_argument("--manifest", help="evaluate the pruned model on this manifest")
    p.add_argument("--vocab")

    p = sub.add_parser("decode", help="transcribe one WAV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)

    p = sub.add_parser("ablate-losses", help="EncRL + finetune once per loss mode")
    _common(p)
    _data_flags(p)
    p.add_argument("--reference", help="reference checkpoint")
    p.add_argument("--layers", type=int)
    return parser


def resolve_config(args, phase: str) -> TrainConfig:
    cfg = TrainConfig(phase=phase)
    if getattr(args, "config", None):
        cfg = apply_settings(cfg, read_config_file(args.config))
    flags = {}
    for key in ("out", "seed", "train_manifest", "test_manifest", "vocab", "layers", "loss", "slice", "reference", "init"):
        value = getattr(args, key, None)
        if value is not None:
            flags[key] = str(value)
    if getattr(args, "fresh_head", False):
        flags["reuse_head"] = "false"
    flags.update(parse_overrides(getattr(args, "set", [])))
    cfg = apply_settings(cfg, flags)
    cfg = dataclasses.replace(cfg, phase=phase)
    cfg.validate()
    return cfg


def echo_config(cfg: TrainConfig, name: str) -> Path:
    out = Path(cfg.out) / name
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.txt").write_text(format_config(cfg), encoding="utf-8")
    return out


def _verify_run(result) -> None:
    load_checkpoint(result.final_path)
    load_checkpoint(result.best_path)
    read_runlog(result.log.path)


def cmd_synth(args) -> int:
    path = synth_dataset(args.items, args.vocab_size, args.seed, args.out, n_test=args.test_items, noise=args.noise)
    print(path)
    return 0


def cmd_train_reference(args) -> int:
    cfg = resolve_config(args, "reference")
    echo_config(cfg, "reference")
    result = train_reference(cfg)
    _verify_run(result)
    print(result.final_path)
    return 0


def cmd_encrl(args) -> int:
    cfg = resolve_config(args, "encrl")
    if not cfg.reference:
        raise ConfigError("encrl needs --reference <checkpoint>")
    echo_config(cfg, "encrl")
    result = train_encrl(cfg, load_checkpoint(cfg.reference))
    _verify_run(result)
    print(result.final_path)
    return 0


def cmd_finetune(args) -> int:
    cfg = resolve_config(args, "finetune")
    if not cfg.init:
        raise ConfigError("finetune needs --init <checkpoint>")
    echo_config(cfg, "finetune")
    result = finetune(cfg, load_checkpoint(cfg.init))
    _verify_run(result)
    print(result.final_path)
    return 0


def _vocab_for(ckpt, explicit: str | None) -> Vocabulary:
    if explicit:
        return Vocabulary.load(explicit)
    if "vocab" in ckpt.meta:
        return Vocabulary(list(ckpt.meta["vocab"]))
    raise ConfigError("checkpoint carries no vocabulary; pass --vocab")


def _write_report(out: Path, report, name: str) -> None:
    text = report.to_text()
    (out / name).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args, "reference")
    out = echo_config(cfg, "evaluate")
    ckpt = load_checkpoint(args.checkpoint)
    report = evaluate(ckpt.to_model(), args.manifest, _vocab_for(ckpt, args.vocab))
    report.meta["checkpoint"] = args.checkpoint
    _write_report(out, report, "report.txt")
    return 0


def cmd_prune(args) -> int:
    cfg = resolve_config(args, "reference")
    out = echo_config(cfg, "prune")
    ckpt = load_checkpoint(args.checkpoint)
    pruned, prune_report = magnitude_prune(ckpt.to_model(), args.fraction, args.exclude_conv)
    target = out / "pruned.ckpt"
    save_checkpoint(pruned, {**ckpt.meta, "prune": pruned.info["prune"]}, target)
    load_checkpoint(target)
    lines = [
        f"fraction={args.fraction}",
        f"exclude_conv={args.exclude_conv}",
        f"eligible={prune_report.n_eligible}",
        f"pruned={prune_report.n_pruned}",
        f"threshold={prune_report.threshold!r}",
    ] + [f"zeroed.{k}={v}" for k, v in prune_report.zeroed.items() if v or k.endswith(".weight")]
    (out / "prune_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(target)
    if args.manifest:
        report = evaluate(pruned, args.manifest, _vocab_for(ckpt, args.vocab))
        report.meta.update(prune_fraction=args.fraction, exclude_conv=args.exclude_conv)
        _write_report(out, report, "report.txt")
    return 0


def cmd_decode(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model().eval()
    vocab = _vocab_for(ckpt, None)
    feats = mel_spectrogram(load_wav(args.wav), n_mels=model.config.n_mels)
    with ad.no_grad():
        x = feats.frames[None].astype(model.dtype)
        e, lengths = forward_encoder(model, x, np.array([feats.n_frames]))
        hyp = ctc_greedy_decode(forward_classifier(model, e), lengths)[0]
    print(detokenize(hyp, vocab))
    return 0


def run_loss_ablation(cfg: TrainConfig, reference) -> list[tuple[str, float]]:
    """EncRL then finetune once per loss mode; every mode uses the same seed."""
    data = load_data(cfg)
    rows = []
    for mode in ENCRL_MODES:
        sub = dataclasses.replace(cfg, loss=mode, out=str(Path(cfg.out) / "ablate-losses" / mode.replace("+", "_")))
        enc = train_encrl(sub, reference, data)
        ft = finetune(sub, enc.model, data)
        wer = evaluate(ft.model, data.test or data.train, data.vocab).wer
        rows.append((mode, wer))
    return rows


def format_ablation_table(rows: list[tuple[str, float]]) -> str:
    lines = [f"{'loss':<10} {'WER toy (%)':>12} {'published, not reproduced (%)':>31}"]
    for mode, wer in rows:
        lines.append(f"{mode.upper():<10} {100 * wer:>12.2f} {PUBLISHED_LOSS_ABLATION[mode]:>31.2f}")
    return "\n".join(lines) + "\n"


def cmd_ablate_losses(args) -> int:
    cfg = resolve_config(args, "encrl")
    if not cfg.reference:
        raise ConfigError("ablate-losses needs --reference <checkpoint>")
    out = echo_config(cfg, "ablate-losses")
    rows = run_loss_ablation(cfg, load_checkpoint(cfg.reference))
    table = format_ablation_table(rows)
    (out / "table.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train-reference": cmd_train_reference,
    "encrl": cmd_encrl,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "prune": cmd_prune,
    "decode": cmd_decode,
    "ablate-losses": cmd_ablate_losses,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except USER_ERRORS as exc:
        print(f"encrl {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

import dataclasses
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from encrl.config import apply_settings, read_config_file  # noqa: E402
from encrl.frontend import synth_dataset  # noqa: E402
from encrl.training import TrainConfig, load_data, train_reference  # noqa: E402

TOY_CONF = Path(__file__).resolve().parents[1] / "configs" / "toy.conf"

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def small_config(**overrides) -> TrainConfig:
    """A fast 2-layer setup for unit tests."""
    base = TrainConfig(
        phase="reference",
        z=3,
        batch_size=8,
        peak_lr=3e-3,
        warmup_steps=5,
        decay_rate=0.999,
        layers=2,
        d_model=16,
        ff_dim=32,
        heads=2,
        conv_kernel=3,
        specaug=False,
        out="",
    )
    return dataclasses.replace(base, **overrides)


def toy_config(**overrides) -> TrainConfig:
    """The shipped toy configuration (configs/toy.conf) with in-memory outputs."""
    cfg = apply_settings(TrainConfig(phase="reference"), read_config_file(TOY_CONF))
    return dataclasses.replace(cfg, out="", **overrides)


@pytest.fixture(scope="session")
def synthetic_test(tmp_path_factory):
    """The 100-item held-out split of the default 9-symbol synthetic corpus."""
    root = tmp_path_factory.mktemp("synthetic_test")
    synth_dataset(0, 9, 1, root, n_test=100)
    return load_data(toy_config(train_manifest=str(root / "test.tsv")))


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    train = synth_dataset(24, 5, 3, root, n_test=8)
    return {"root": root, "train": str(train), "test": str(root / "test.tsv"), "vocab": str(root / "vocab.txt")}


@pytest.fixture(scope="session")
def corpus_data(corpus):
    return load_data(small_config(train_manifest=corpus["train"], test_manifest=corpus["test"]))


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Two utterances, toy architecture, 200 single-batch steps without augmentation."""
    root = tmp_path_factory.mktemp("overfit")
    synth_dataset(2, 9, 11, root)
    cfg = toy_config(
        train_manifest=str(root / "train.tsv"), epochs=200, batch_size=2, warmup_steps=10, decay_rate=1.0, specaug=False
    )
    data = load_data(cfg)
    return cfg, data, train_reference(cfg, data)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

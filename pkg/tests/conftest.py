import dataclasses

import numpy as np
import pytest
import torch

from codebrain.config import NetConfig, PhantomConfig, TrainConfig
from codebrain.synthdata import generate_dataset
from codebrain.training import train_stage1, train_stage2

torch.set_num_threads(1)

TINY_PHANTOM = PhantomConfig(image_size=32, n_subjects=24, seed=99)
TINY_NET = NetConfig(image_size=32, base_width=4, common_channels=8, disc_width=8)
TINY_S1 = TrainConfig(stage=1, epochs=2, batch_size=8, checkpoint_every=1)
TINY_S2 = TrainConfig(stage=2, epochs=2, batch_size=8, checkpoint_every=1)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_dataset(TINY_PHANTOM)


@pytest.fixture(scope="session")
def tiny_run(tiny_data, tmp_path_factory):
    """Two-epoch stage-1 + stage-2 run with checkpoints on disk."""
    root = tmp_path_factory.mktemp("tiny_run")
    m1, r1 = train_stage1(tiny_data, TINY_NET, TINY_S1, out_dir=root / "s1")
    m2, r2 = train_stage2(tiny_data, m1, TINY_S2, out_dir=root / "s2")
    return {"root": root, "stage1": m1, "stage2": m2, "r1": r1, "r2": r2,
            "ckpt1": root / "s1" / "stage1_final.ckpt", "ckpt2": root / "s2" / "stage2_final.ckpt"}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def replace(cfg, **kw):
    return dataclasses.replace(cfg, **kw)


# one PASS/FAIL line per acceptance criterion, collected by tests/test_acceptance.py
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

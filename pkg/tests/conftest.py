import dataclasses
from pathlib import Path

import pytest

from objectnlq.data import load_dataset, synth_generate
from objectnlq.encoders import ModelConfig
from objectnlq.training import TrainConfig, fit_to_dataset


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    synth_generate(root, n_videos=6, T=64, D_in=12, vocab_size=6, seed=5, n_train=16, n_eval=6, max_len=16)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_root):
    return load_dataset(tiny_root)


@pytest.fixture
def tiny_train_cfg(tiny_dataset):
    model = ModelConfig(model_dim=16, heads=2, text_blocks=1, object_blocks=1, mm_blocks=1, pyramid_levels=3, ffn_expansion=2)
    cfg = TrainConfig(batch_size=4, base_lr=1e-3, warmup_epochs=1, total_epochs=2, seed=0, model=model)
    return fit_to_dataset(cfg, tiny_dataset)


def with_model(cfg, **kw):
    return dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **kw))


REPO = Path(__file__).resolve().parent.parent
ACCEPTANCE = {}


def record(number, title, passed, detail=""):
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])

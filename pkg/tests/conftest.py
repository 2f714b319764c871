import sys
from pathlib import Path

import numpy as np
import pytest

from a2forge import model as M
from a2forge.training import TrainConfig, load_data, train

ROOT = Path(__file__).resolve().parents[1]


def blob_config(**kw) -> TrainConfig:
    base = dict(
        dataset="blobs", n_train=300, n_val=60, n_test=100, blob_dim=4, blob_classes=4,
        blob_separation=0.6, hidden=(16, 16), epochs=4, batch_size=50, steps=3,
        eps=0.06, eta=0.02, eval_steps=5, attacker="none", seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def blob_data():
    return load_data(blob_config())


@pytest.fixture(scope="session")
def toy_model(blob_data):
    """Naturally trained 4-class MLP on 4-D blobs."""
    return train(blob_config(epochs=6), blob_data).best


@pytest.fixture
def linear_model():
    rng = np.random.default_rng(3)
    return M.DefenseParams([rng.normal(size=(5, 2))], [np.zeros(2)])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, (ok, detail) in sorted(mod.RESULTS.items()):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

import numpy as np
import pytest
import torch

from cfcontrast.hvae import HvaeConfig, TrainConfig, train_mechanism
from cfcontrast.worlds import WorldSpec, generate_dataset

TINY_SPLITS = {"train": 120, "val": 40, "test": 60}


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_spec():
    return WorldSpec(samples_per_split=TINY_SPLITS)


@pytest.fixture(scope="session")
def tiny_world(tiny_spec):
    return generate_dataset(tiny_spec)


@pytest.fixture(scope="session")
def tiny_mechanism(tiny_world):
    """A barely trained generator: enough for algebraic checks, not for quality."""
    res = train_mechanism(tiny_world.split("train"), tiny_world.split("val"),
                          TrainConfig(epochs=2, seed=0), HvaeConfig())
    return res.mechanism


@pytest.fixture(scope="session")
def lab():
    from _lab import LAB
    return LAB


def pytest_terminal_summary(terminalreporter):
    from _lab import VERDICTS
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")

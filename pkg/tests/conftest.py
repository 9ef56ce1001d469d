import json
import sys
from pathlib import Path

import numpy as np
import pytest

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE))

FIXTURES = HERE / "fixtures"


@pytest.fixture(scope="session")
def golden():
    return json.loads((FIXTURES / "golden.json").read_text())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_images(rng, n=6, size=12, channels=3):
    return rng.uniform(0.0, 1.0, size=(n, size, size, channels))


@pytest.fixture(scope="session")
def tiny_checkpoint():
    """Untrained tiny-cnn with fixed initialization; enough for scoring contracts."""
    from con2.trainer import Checkpoint, ModelConfig, TrainConfig, build_model

    cfg = ModelConfig()
    return Checkpoint(model=build_model(cfg, seed=0), model_config=cfg,
                      train_config=TrainConfig(), input_size=(16, 16))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

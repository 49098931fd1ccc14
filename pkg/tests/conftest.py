import numpy as np
import pytest

from changealign.pipeline import ModelConfig, train
from changealign.synthgen import SceneSpec, gen_dataset

TRAIN_STEPS = 500


@pytest.fixture(scope="session")
def scenes():
    samples, manifest = gen_dataset(1000, 40, SceneSpec())
    return samples, manifest


@pytest.fixture(scope="session")
def trained(scenes):
    """Default model trained for 500 steps on 32 default scenes."""
    samples, _ = scenes
    return train(ModelConfig(), samples[:32], TRAIN_STEPS, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")

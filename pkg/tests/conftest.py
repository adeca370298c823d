import numpy as np
import pytest

from contsep.config import ExperimentConfig
from contsep.data import generate_class_bank, generate_dataset
from contsep.dsp import DESK


@pytest.fixture(scope="session")
def tiny_data():
    """Four classes, five clips each (3 train / 1 val / 1 test)."""
    return generate_dataset(generate_class_bank(4, seed=0), 5, DESK.clip_samples,
                            DESK.sample_rate)


@pytest.fixture(scope="session")
def desk_data():
    cfg = ExperimentConfig()
    return generate_dataset(generate_class_bank(cfg.num_classes, seed=cfg.data_seed),
                            cfg.samples_per_class, DESK.clip_samples, DESK.sample_rate)


@pytest.fixture
def tiny_cfg():
    return ExperimentConfig(num_classes=4, num_tasks=2, samples_per_class=5, steps_per_task=2,
                            batch_size=2, eval_mixtures=2, seeds=(0,), filter_len=64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.line(n))

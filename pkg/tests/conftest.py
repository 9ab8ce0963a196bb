import numpy as np
import pytest

from helpers import SMALL_NET
from weakcount.preprocess import MetricConfig
from weakcount.signal import build_benchmark, split_dataset
from weakcount.train import TrainConfig, prepare_pipeline_data, train_member


@pytest.fixture(scope="session")
def bench2():
    return build_benchmark(seed=0)


@pytest.fixture(scope="session")
def small_bench():
    return build_benchmark(seed=5, recordings_per_bin=3)


@pytest.fixture(scope="session")
def small_data(small_bench):
    learn, val = split_dataset(small_bench, 0.1, seed=0)
    return prepare_pipeline_data(learn, val, MetricConfig())


@pytest.fixture(scope="session")
def trained_member(small_data):
    """A small quantized model trained briefly on the reduced benchmark."""
    cfg = TrainConfig(max_epochs=4, qat_max_epochs=1, pretrain=False, vat=False)
    return train_member(small_data, SMALL_NET, cfg, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])

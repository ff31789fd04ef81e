import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bimag.data import BenchmarkSpec, generate_benchmark, split_tasks  # noqa: E402
from bimag.training import TrainingConfig  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_world():
    """Ten classes split 8/2 on the default benchmark settings."""
    data, table = generate_benchmark(BenchmarkSpec(seed=0))
    return split_tasks(data, [8, 2]), table


@pytest.fixture(scope="session")
def fast_config():
    return TrainingConfig(epochs_feature=3, epochs_vae=3, epochs_classifier=3, synth_per_class=20,
                          feature_dim=8, feature_hidden=(16,), latent_dim=4, enc_hidden=(16, 8),
                          dec_hidden=(16,), batch_size=32, seed=0)

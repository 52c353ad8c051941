import sys

import numpy as np
import pytest

from dpfed.config import parse_config
from dpfed.model import MlpSpec, TrainingBatch, init_params

SMALL_CONFIG = """
master_seed = {seed}

[data]
classes = 2
samples_per_class = {per_class}
feature_dim = 2
spread = 1.0
test_fraction = {test_fraction}

[model]
hidden = [6, 6]

[partition]
mode = "{mode}"
clients = {clients}

[privacy]
enabled = {enabled}
epsilon = {epsilon}
clip_norm = 0.05
progress_floor = 0.05

[training]
rounds = {rounds}
base_lr = 0.1
decay = 0.05
batch_size = 8
progress_source = "{source}"
validation_fraction = {val}

[output]
trace = "trace.jsonl"
summary = "summary.json"
"""


def config_text(**overrides) -> str:
    params = dict(
        seed=3, per_class=30, test_fraction=0.2, mode="iid", clients=3, enabled="true",
        epsilon=1.0, rounds=6, source="validation_split", val=0.1,
    )
    params.update(overrides)
    return SMALL_CONFIG.format(**params)


@pytest.fixture
def small_config():
    def make(**overrides):
        return parse_config(config_text(**overrides))

    return make


def random_problem(rng: np.random.Generator, dims=None, n=None):
    """Random (params, batch) pair with weights scaled away from initialization."""
    if dims is None:
        dims = (int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(2, 5)))
    if n is None:
        n = int(rng.integers(1, 12))
    spec = MlpSpec(dims)
    params = init_params(spec, int(rng.integers(2**63)))
    params = params.with_values(params.values + 0.3 * rng.standard_normal(len(params)))
    batch = TrainingBatch(rng.standard_normal((n, dims[0])), rng.integers(0, dims[-1], n))
    return params, batch


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)

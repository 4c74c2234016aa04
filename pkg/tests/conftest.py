import numpy as np
import pytest
import torch

from umts.config import Config
from umts.data import SyntheticNoise, generate_synthetic_reid

torch.use_deterministic_algorithms(True)
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """12 train identities and 6 test identities, 6 shots each, 32x16."""
    return generate_synthetic_reid(12, 6, SyntheticNoise(0.3, 0.2, 0.5), seed=3,
                                   num_test_ids=6, query_per_id=2)


@pytest.fixture
def tiny_config():
    cfg = Config()
    cfg.sampler.P = 4
    cfg.sampler.K = 4
    cfg.backbone.stage_channels = [16, 32, 64, 64]
    cfg.backbone.embed_dim = 32
    cfg.optimizer.teacher_epochs = 2
    cfg.optimizer.student_epochs = 2
    cfg.optimizer.lr = 1e-3
    cfg.eval.max_rank = 5
    return cfg


ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    def record(key: str, passed: bool, detail: str):
        ACCEPTANCE_LINES[key] = f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k.rstrip("abc")), k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])

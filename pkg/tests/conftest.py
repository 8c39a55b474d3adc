import numpy as np
import pytest
import torch

from ammdiff.dataset import PhantomSpec, generate_phantom_dataset

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_phantoms(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantoms")
    return generate_phantom_dataset(PhantomSpec(str(root), n_subjects=10, height=32, width=32, seed=7))


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])

import numpy as np
import pytest
import torch

from vendornorm.phantom import STYLE_A, STYLE_B, PhantomSpec, generate_phantom_pairless


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_phantoms():
    """24 phantoms per domain at 36 px: big enough for the FOV-34 critic, cheap to train on."""
    return generate_phantom_pairless(PhantomSpec(image_size=36, n_images=24, seed=11), STYLE_A, STYLE_B)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from dpreid.dataset import synth_generate

# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """12 identities, 3 cameras, 3 images per (id, camera)."""
    root = tmp_path_factory.mktemp("synth_small")
    synth_generate(root, n_ids=12, n_cameras=3, imgs_per_pair=3, seed=5)
    return root

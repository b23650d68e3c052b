import numpy as np
import pytest

from ssmpface.data import ScanGrid


def make_grid(z, valid=None, step=1.0, subject_id="s", scan_id="g"):
    z = np.asarray(z, dtype=float)
    rows, cols = z.shape
    x = np.tile(np.arange(cols) * step, (rows, 1))
    y = np.tile((rows - 1 - np.arange(rows))[:, None] * step, (1, cols))
    if valid is None:
        valid = np.ones(z.shape, bool)
    return ScanGrid(x, y, z, valid, subject_id, scan_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Three subjects x three scans of 64x64 synthetic faces, preprocessed once."""
    from ssmpface import pipeline
    from ssmpface.data import SynthParams

    root = tmp_path_factory.mktemp("small")
    manifest = pipeline.cmd_synth(3, 3, root / "ds", SynthParams(size=64), seed=5)
    res = pipeline.cmd_preprocess(manifest, root / "pp")
    assert res.exit_code == 0
    return root


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to sys.path so tests can import project modules
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from trajectories import normalize  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


class LookupCodec:
    """Exact codec: keys are the flattened past plus a constant 1, values the flattened future."""

    def __init__(self, past_len: int = 4, future_len: int = 8, width: int = 48):
        self.past_len = past_len
        self.future_len = future_len
        self.width = width

    def _pad(self, points, fill: float | None) -> np.ndarray:
        arr = np.asarray(points, dtype=np.float64)
        single = arr.ndim == 2
        flat = arr.reshape(1 if single else arr.shape[0], -1)
        out = np.zeros((flat.shape[0], self.width))
        out[:, :flat.shape[1]] = flat
        if fill is not None:
            out[:, flat.shape[1]] = fill
        return out[0] if single else out

    def encode_past(self, past) -> np.ndarray:
        return self._pad(past, 1.0)

    def encode_future(self, future) -> np.ndarray:
        return self._pad(future, None)

    def decode(self, pi, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=np.float64)
        n = 2 * self.future_len
        if phi.ndim == 1:
            return phi[:n].reshape(self.future_len, 2)
        return phi[:, :n].reshape(len(phi), self.future_len, 2)


@pytest.fixture
def lookup_codec():
    return LookupCodec()


def straight_sample(speed: float, sample_id: str, past_len: int = 4, future_len: int = 8,
                    noise: float = 0.0, rng: np.random.Generator | None = None, map_ref: str | None = None):
    """Constant-velocity sample along +Y ending at the origin."""
    steps = np.arange(-(past_len - 1), future_len + 1, dtype=np.float64)
    points = np.column_stack([np.zeros_like(steps), speed * steps])
    if noise and rng is not None:
        points = points + rng.normal(0.0, noise, size=points.shape)
    return normalize(points[:past_len], points[past_len:], sample_id=sample_id, map_ref=map_ref)


@pytest.fixture
def make_straight():
    return straight_sample

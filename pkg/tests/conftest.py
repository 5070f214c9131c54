import pytest

from flowsync.facegen import FaceGenConfig, FaceSpec
from flowsync.numerics import Grid2D, RngStream


@pytest.fixture
def gen_cfg():
    return FaceGenConfig()


@pytest.fixture
def spec0():
    """Default geometry, centered pose."""
    return FaceSpec(
        identity_seed=1234,
        pose=(0, 0),
        mouth_center=(16, 21),
        mouth_radii=(6, 4),
        frame_size=(32, 32),
    )


@pytest.fixture
def spec_shifted():
    return FaceSpec(
        identity_seed=987654321,
        pose=(3, -2),
        mouth_center=(16, 21),
        mouth_radii=(6, 4),
        frame_size=(32, 32),
    )


@pytest.fixture
def rng():
    return RngStream(42, 0)


def random_grid(h, w, seed=0, lo=0.0, hi=1.0):
    gen = RngStream(seed, 0)
    return Grid2D(h, w, gen.uniform(lo, hi, n=h * w))


@pytest.fixture
def grid8():
    return random_grid(8, 8, seed=3)

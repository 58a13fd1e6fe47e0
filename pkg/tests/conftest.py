import numpy as np
import pytest

from cfseg import PhantomSpec, generate, make_views


@pytest.fixture(scope="session")
def phantom64():
    """Small fractured phantom shared by projection/pipeline tests."""
    return generate(PhantomSpec(seed=7, dims=(64, 64, 64), fragments=(2, 2, 1)))


@pytest.fixture(scope="session")
def views64(phantom64):
    """Eight 96x96 views of the shared phantom."""
    return make_views(phantom64, 8, width=96, height=96)


def random_mask(rng: np.random.Generator, h: int, w: int, p: float = 0.5) -> np.ndarray:
    return rng.random((h, w)) < p


def random_blob_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Connected-ish random mask: a few discs, more like segmentation output."""
    out = np.zeros((h, w), dtype=bool)
    yy, xx = np.ogrid[0:h, 0:w]
    for _ in range(int(rng.integers(1, 4))):
        r = int(rng.integers(0, h))
        c = int(rng.integers(0, w))
        rad = int(rng.integers(2, max(3, min(h, w) // 3)))
        out |= ((yy - r) ** 2 + (xx - c) ** 2) <= rad * rad
    return out

from __future__ import annotations

import numpy as np
import pytest

from pointseg.geometry import Image2D, Mask2D


@pytest.fixture
def img128() -> Image2D:
    return Image2D(np.zeros((128, 128)))


def mask_from_points(width: int, height: int, points: list[tuple[int, int]]) -> Mask2D:
    bits = np.zeros((height, width), dtype=bool)
    for x, y in points:
        bits[y, x] = True
    return Mask2D(bits)


def random_mask(rng: np.random.Generator, max_side: int = 24, density: float = 0.3) -> Mask2D:
    h = int(rng.integers(1, max_side + 1))
    w = int(rng.integers(1, max_side + 1))
    return Mask2D(rng.random((h, w)) < density)

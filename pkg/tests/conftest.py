"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from mpcotrain import LabelMask, Volume


def random_volume(rng: np.random.Generator, shape=(6, 5, 4), lo=-200.0, hi=400.0) -> Volume:
    d, h, w = shape
    raw = rng.uniform(lo, hi, size=(d, h, w)).astype(np.float32)
    return Volume(voxels=raw, spacing=(1.0, 1.0, 1.0))


def random_mask(rng: np.random.Generator, shape=(6, 5, 4), num_classes=4) -> LabelMask:
    d, h, w = shape
    labels = rng.integers(0, num_classes + 1, size=(d, h, w), dtype=np.uint8)
    return LabelMask(labels=labels, num_classes=num_classes)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(20240816))

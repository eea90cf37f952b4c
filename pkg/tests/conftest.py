from __future__ import annotations

import numpy as np
import pytest

from glandseg.dataset_io import DatasetSplit, ImageSample


def make_sample(sample_id: str, labels: np.ndarray, rng=None) -> ImageSample:
    """Wrap a label map into an ImageSample with a synthetic-looking image."""
    labels = np.asarray(labels, dtype=np.int32)
    h, w = labels.shape
    rng = rng or np.random.default_rng(0)
    image = rng.integers(120, 220, size=(h, w, 3)).astype(np.uint8)
    image[labels > 0] = (90, 60, 140)
    return ImageSample(sample_id, image, labels)


@pytest.fixture
def square_sample() -> ImageSample:
    """One 4x4 gland square centered in an 8x8 frame."""
    labels = np.zeros((8, 8), dtype=np.int32)
    labels[2:6, 2:6] = 1
    return make_sample("square", labels)


@pytest.fixture
def touching_sample() -> ImageSample:
    """Two gland instances sharing a vertical edge."""
    labels = np.zeros((8, 10), dtype=np.int32)
    labels[2:6, 1:5] = 1
    labels[2:6, 5:9] = 2
    return make_sample("touching", labels)


def tiny_split(n_train=2, n_test=1, side=64, seed=3) -> DatasetSplit:
    from glandseg.dataset_io import generate_synthetic

    return generate_synthetic(n_train, side, side, seed, n_test=n_test)

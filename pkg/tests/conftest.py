import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from placenet.data import (
    Dataset,
    MultiCategoryPointSet,
    validate_distance_matrix,
)


def make_sample(seed=0, n=8, num_categories=3, place_type=0, label=0, sample_id=None):
    rng = np.random.default_rng(seed)
    return MultiCategoryPointSet(
        sample_id or f"s{seed}",
        place_type,
        label,
        rng.integers(0, num_categories, n),
        rng.uniform(0.0, 10.0, (n, 2)),
    )


@pytest.fixture
def tiny_dataset():
    """Two place-types, two classes, three categories, 8 samples."""
    samples = []
    i = 0
    for pt in (0, 1):
        for label in (0, 1):
            for _ in range(2):
                samples.append(
                    make_sample(seed=i, place_type=pt, label=label, sample_id=f"t{i}")
                )
                i += 1
    matrix = validate_distance_matrix([[1.0, 2.0], [2.0, 1.0]], threshold=2.0)
    return Dataset(("A", "B", "C"), ("PT1", "PT2"), tuple(samples), matrix)

import numpy as np
import pytest

from repri.core import FeatureMap, PixelMask, TaskInstance


def random_task(seed=0, h=4, w=5, c=6, k=2, with_gt=True, fg_rate=0.4):
    """Small random-but-valid task; deterministic in the seed."""
    rng = np.random.default_rng(seed)
    supports = []
    for _ in range(k):
        feats = FeatureMap(rng.standard_normal((h, w, c)))
        mask = (rng.random((h, w)) < fg_rate).astype(np.uint8)
        supports.append((feats, mask))
    if not any(m.sum() for _, m in supports):
        supports[0][1][0, 0] = 1
    supports = tuple((f, PixelMask(m)) for f, m in supports)
    gt = PixelMask((rng.random((h, w)) < fg_rate).astype(np.uint8)) if with_gt else None
    return TaskInstance(
        supports=supports, query=FeatureMap(rng.standard_normal((h, w, c))), query_gt=gt
    )


@pytest.fixture
def task():
    return random_task(seed=1)

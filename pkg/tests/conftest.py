"""Shared fixtures: small synthetic volumes and patch sets.

Session-scoped so the projection/reconstruction cost is paid once; tests
must not mutate what they receive.
"""

import numpy as np
import pytest

from ctrefine import simulate


@pytest.fixture(scope="session")
def small_pair():
    """One degraded/reference volume pair at desk-test scale (8x48x48)."""
    _, truth = simulate.generate_phantom_volume(seed=301, dims=(8, 48, 48))
    y, x = simulate.make_pair(truth, views=24, noise_sigma=15.0, seed=301)
    return y, x


@pytest.fixture(scope="session")
def normalized_pair(small_pair):
    """The same pair as window-normalized float32 arrays."""
    y, x = small_pair
    yn = simulate.hu_normalize(y.voxels.astype(np.float64)).astype(np.float32)
    xn = simulate.hu_normalize(x.voxels.astype(np.float64)).astype(np.float32)
    return yn, xn


@pytest.fixture(scope="session")
def patchset_2d(normalized_pair):
    """5000 single-slice 12x12 training patches from the small pair."""
    yn, xn = normalized_pair
    return simulate.extract_patches(yn, xn, patch_size=12, window=1,
                                    count=5000, augment=True, seed=77, volume_id=0)

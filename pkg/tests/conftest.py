import numpy as np
import pytest

from parcelbench.volume import LabelVolume, Mask, Volume


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_label_volume(data, spacing=(1.0, 1.0, 1.0), affine=None, labels=None):
    data = np.asarray(data)
    if affine is None:
        affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
    grid = Volume(data.astype(np.uint8), spacing, affine)
    if labels is None:
        labels = {int(i): f"region_{int(i)}" for i in np.unique(data) if i != 0}
    return LabelVolume(grid=grid, labels=labels)


def make_mask(data, spacing=(1.0, 1.0, 1.0), affine=None):
    data = np.asarray(data).astype(np.uint8)
    if affine is None:
        affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
    return Mask(grid=Volume(data, spacing, affine))


def flat_mask(n_voxels, dims=(16, 12, 12)):
    """Mask whose first n_voxels (lexicographic) are inside; handy for stacks."""
    data = np.zeros(dims, dtype=np.uint8)
    data.reshape(-1)[:n_voxels] = 1
    return make_mask(data)

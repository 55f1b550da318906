import numpy as np
import pytest

from parcelbench.fusion import AtlasPrior, FusionConfig, MultiAtlasLabelFusion, fuse, patch_mse
from parcelbench.volume import GridMismatchError, LabelVolume, Volume

from conftest import make_label_volume, make_mask

DIMS = (6, 6, 6)


def vol(data):
    return Volume(np.asarray(data, dtype=np.float32), (1, 1, 1), np.eye(4))


def prior(intensity, labels, names=None):
    return AtlasPrior(intensity=vol(intensity), labels=make_label_volume(labels, labels=names))


def full_mask():
    return make_mask(np.ones(DIMS))


# --- patch_mse -------------------------------------------------------------


def test_patch_mse_identical_is_zero(rng):
    a = vol(rng.standard_normal(DIMS))
    assert patch_mse(a, a, (3, 3, 3), 1) == 0.0


def test_patch_mse_constant_offset(rng):
    a = vol(rng.standard_normal(DIMS))
    b = vol(a.data + 2.5)
    assert abs(patch_mse(a, b, (2, 2, 2), 1) - 6.25) < 1e-6  # float32 storage rounding


def test_patch_mse_single_differing_voxel():
    a = vol(np.zeros(DIMS))
    bd = np.zeros(DIMS)
    bd[3, 3, 3] = 3.0
    b = vol(bd)
    assert abs(patch_mse(a, b, (3, 3, 3), 1) - 9.0 / 27.0) < 1e-12


def test_patch_mse_clipped_at_bounds():
    a = vol(np.zeros(DIMS))
    bd = np.zeros(DIMS)
    bd[0, 0, 0] = 2.0
    b = vol(bd)
    # corner patch has 8 in-bounds voxels
    assert abs(patch_mse(a, b, (0, 0, 0), 1) - 4.0 / 8.0) < 1e-12


def test_patch_mse_radius_zero():
    a = vol(np.zeros(DIMS))
    bd = np.zeros(DIMS)
    bd[1, 2, 3] = 1.5
    assert abs(patch_mse(a, vol(bd), (1, 2, 3), 0) - 2.25) < 1e-12


# --- fuse ------------------------------------------------------------------


def test_unanimous_priors_reproduce_labels(rng):
    labels = rng.integers(0, 4, DIMS)
    target = vol(rng.standard_normal(DIMS))
    priors = [prior(rng.standard_normal(DIMS), labels) for _ in range(3)]
    out = fuse(target, priors, full_mask())
    assert np.array_equal(out.data, labels.astype(out.data.dtype))


def test_equal_weights_majority_vote():
    target = vol(np.zeros(DIMS))
    intensity = np.zeros(DIMS)  # all priors match target exactly: equal weights
    votes = [2, 2, 2, 5]
    priors = [prior(intensity, np.full(DIMS, v), names={2: "a", 5: "b"}) for v in votes]
    out = fuse(target, priors, full_mask())
    assert (out.data == 2).all()


def test_exact_match_prior_dominates():
    target_data = np.zeros(DIMS)
    target = vol(target_data)
    exact = prior(target_data, np.full(DIMS, 7), names={7: "match", 3: "far"})
    far = prior(target_data + 10.0, np.full(DIMS, 3), names={7: "match", 3: "far"})
    out = fuse(target, [far, exact], full_mask())
    assert (out.data == 7).all()


def test_outside_mask_is_background(rng):
    labels = rng.integers(1, 3, DIMS)
    target = vol(rng.standard_normal(DIMS))
    mask_data = np.zeros(DIMS)
    mask_data[2:4, 2:4, 2:4] = 1
    out = fuse(target, [prior(target.data, labels)], make_mask(mask_data))
    assert not out.data[mask_data == 0].any()
    assert out.data[mask_data == 1].all()


def test_prior_order_irrelevant(rng):
    target = vol(rng.standard_normal(DIMS))
    priors = [
        prior(rng.standard_normal(DIMS), rng.integers(0, 5, DIMS), names={i: f"r{i}" for i in range(1, 5)})
        for _ in range(4)
    ]
    a = fuse(target, priors, full_mask())
    b = fuse(target, priors[::-1], full_mask())
    assert np.array_equal(a.data, b.data)


def test_single_prior_restriction(rng):
    labels = rng.integers(0, 4, DIMS)
    target = vol(rng.standard_normal(DIMS))
    mask_data = (rng.random(DIMS) < 0.5).astype(int)
    out = fuse(target, [prior(rng.standard_normal(DIMS), labels)], make_mask(mask_data))
    assert np.array_equal(out.data[mask_data == 1], labels[mask_data == 1].astype(out.data.dtype))
    assert not out.data[mask_data == 0].any()


def test_worthless_prior_changes_nothing(rng):
    target = vol(rng.standard_normal(DIMS))
    good = [
        prior(target.data + 0.1 * rng.standard_normal(DIMS), rng.integers(0, 4, DIMS),
              names={i: f"r{i}" for i in range(1, 6)})
        for _ in range(3)
    ]
    junk = prior(target.data + 1e6, np.full(DIMS, 5), names={i: f"r{i}" for i in range(1, 6)})
    a = fuse(target, good, full_mask())
    b = fuse(target, good + [junk], full_mask())
    assert np.array_equal(a.data, b.data)


def test_output_labels_subset_of_priors(rng):
    target = vol(rng.standard_normal(DIMS))
    priors = [prior(rng.standard_normal(DIMS), rng.integers(0, 3, DIMS)) for _ in range(3)]
    out = fuse(target, priors, full_mask())
    union = set()
    for p in priors:
        union |= set(np.unique(p.labels.data).tolist())
    assert set(np.unique(out.data).tolist()) <= union | {0}


def test_empty_prior_list_rejected():
    with pytest.raises(ValueError, match="prior"):
        fuse(vol(np.zeros(DIMS)), [], full_mask())


def test_grid_mismatch_rejected(rng):
    target = vol(rng.standard_normal(DIMS))
    other = Volume(np.zeros((5, 5, 5), dtype=np.float32), (1, 1, 1), np.eye(4))
    bad = AtlasPrior(
        intensity=other,
        labels=LabelVolume(grid=Volume(np.zeros((5, 5, 5), dtype=np.uint8), (1, 1, 1), np.eye(4)), labels={}),
    )
    with pytest.raises(GridMismatchError):
        fuse(target, [bad], full_mask())


def test_estimator_wrapper(rng):
    labels = rng.integers(0, 3, DIMS)
    target = vol(rng.standard_normal(DIMS))
    priors = [prior(target.data, labels)]
    est = MultiAtlasLabelFusion(patch_radius=1).fit(priors)
    out = est.predict(target, full_mask())
    assert np.array_equal(out.data, labels.astype(out.data.dtype))
    assert est.get_params()["patch_radius"] == 1


def test_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(patch_radius=-1)
    with pytest.raises(ValueError):
        FusionConfig(weight_exponent=0.0)

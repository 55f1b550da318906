"""Similarity-weighted multi-atlas label fusion.

Priors (intensity image + labels, already in target space) vote for each
masked voxel; a prior's vote is weighted by the inverse patchwise MSE
between its intensity image and the target, so locally well-matched priors
dominate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate
from sklearn.base import BaseEstimator

from .volume import LabelVolume, Mask, Volume, check_same_grid


@dataclass(frozen=True)
class AtlasPrior:
    """One warped atlas prior: intensity image and labels on the same grid."""

    intensity: Volume
    labels: LabelVolume

    def __post_init__(self):
        check_same_grid(self.intensity, self.labels)


@dataclass(frozen=True)
class FusionConfig:
    patch_radius: int = 1
    weight_exponent: float = 2.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.patch_radius < 0:
            raise ValueError("patch_radius must be >= 0")
        if self.weight_exponent <= 0:
            raise ValueError("weight_exponent must be > 0")


def patch_mse(a: Volume, b: Volume, center, radius: int) -> float:
    """Mean squared intensity difference over the (2r+1)^3 patch at center.

    The patch is clipped at the volume bounds; the mean runs over the voxels
    actually inside.
    """
    check_same_grid(a, b)
    lo = [max(0, c - radius) for c in center]
    hi = [min(d, c + radius + 1) for c, d in zip(center, a.dims[:3])]
    sa = a.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].astype(np.float64)
    sb = b.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].astype(np.float64)
    return float(np.mean((sa - sb) ** 2))


def _patch_mse_volume(target: np.ndarray, prior: np.ndarray, radius: int) -> np.ndarray:
    """Patch MSE at every voxel, bounds-clipped, via box-filter sums."""
    d2 = (target.astype(np.float64) - prior.astype(np.float64)) ** 2
    if radius == 0:
        return d2
    size = 2 * radius + 1
    kernel = np.ones((size, size, size))
    sums = correlate(d2, kernel, mode="constant", cval=0.0)
    counts = correlate(np.ones_like(d2), kernel, mode="constant", cval=0.0)
    return sums / counts


def fuse(target: Volume, priors, mask: Mask, cfg: FusionConfig | None = None) -> LabelVolume:
    """Fuse prior labels into one segmentation of the masked target.

    Per masked voxel v, prior p votes for its label with weight
    1 / (patch_mse(target, p, v)^beta + eps); the label with the largest
    summed weight wins, ties toward the lower label id.  Voxels outside the
    mask are background 0.
    """
    cfg = cfg or FusionConfig()
    priors = list(priors)
    if not priors:
        raise ValueError("at least one prior is required")
    check_same_grid(target, mask, *[p.intensity for p in priors], *[p.labels for p in priors])

    sel = mask.data > 0
    n = int(sel.sum())
    weights = np.empty((len(priors), n), dtype=np.float64)
    votes = np.empty((len(priors), n), dtype=np.int64)
    for i, p in enumerate(priors):
        mse = _patch_mse_volume(target.data, p.intensity.data, cfg.patch_radius)[sel]
        weights[i] = 1.0 / (mse ** cfg.weight_exponent + cfg.epsilon)
        votes[i] = p.labels.data[sel]

    candidate_ids = sorted(set(np.unique(votes).tolist()))
    best_score = np.full(n, -np.inf)
    best_label = np.zeros(n, dtype=np.int64)
    for lab in candidate_ids:  # ascending: strict > keeps the lower id on ties
        score = np.where(votes == lab, weights, 0.0).sum(axis=0)
        better = score > best_score
        best_score[better] = score[better]
        best_label[better] = lab

    out = np.zeros(target.dims[:3], dtype=np.int16)
    out[sel] = best_label
    if out.max(initial=0) <= 255:
        out = out.astype(np.uint8)
    labels = {}
    for p in priors:
        for k, v in p.labels.labels.items():
            labels.setdefault(k, v)
    grid = Volume(out, target.spacing, target.affine)
    return LabelVolume(grid=grid, labels=labels)


class MultiAtlasLabelFusion(BaseEstimator):
    """Estimator wrapper around :func:`fuse`.

    fit() stores the prior atlas set; predict() fuses it into a segmentation
    of a target image restricted to a mask.
    """

    def __init__(self, patch_radius=1, weight_exponent=2.0, epsilon=1e-6):
        self.patch_radius = patch_radius
        self.weight_exponent = weight_exponent
        self.epsilon = epsilon

    def fit(self, priors, y=None):
        priors = list(priors)
        if not priors:
            raise ValueError("at least one prior is required")
        self.priors_ = priors
        return self

    def predict(self, target: Volume, mask: Mask) -> LabelVolume:
        cfg = FusionConfig(self.patch_radius, self.weight_exponent, self.epsilon)
        return fuse(target, self.priors_, mask, cfg)

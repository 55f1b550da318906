"""Tri-planar PNG rendering of label volumes and probability atlases."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .metrics import ProbabilityAtlas
from .volume import LabelVolume

# Fixed 12-entry palette: background + 11 label colors.
PALETTE = np.array(
    [
        (0, 0, 0),
        (230, 25, 75),
        (60, 180, 75),
        (255, 225, 25),
        (0, 130, 200),
        (245, 130, 48),
        (145, 30, 180),
        (70, 240, 240),
        (240, 50, 230),
        (210, 245, 60),
        (250, 190, 190),
        (0, 128, 128),
    ],
    dtype=np.uint8,
)


def label_color(label: int) -> np.ndarray:
    """Palette entry for a label; ids beyond 11 cycle through the 11 colors."""
    if label == 0:
        return PALETTE[0]
    return PALETTE[1 + (int(label) - 1) % (len(PALETTE) - 1)]


def _mid_slices(data: np.ndarray):
    nx, ny, nz = data.shape
    return [data[nx // 2, :, :], data[:, ny // 2, :], data[:, :, nz // 2]]


def _compose(panels, scale: int) -> Image.Image:
    height = max(p.shape[0] for p in panels)
    padded = []
    for p in panels:
        pad = np.zeros((height, p.shape[1], 3), dtype=np.uint8)
        pad[: p.shape[0]] = p
        padded.append(pad)
        padded.append(np.zeros((height, 2, 3), dtype=np.uint8))
    sheet = np.hstack(padded[:-1])
    img = Image.fromarray(sheet)
    return img.resize((sheet.shape[1] * scale, sheet.shape[0] * scale), Image.NEAREST)


def render_labels(seg: LabelVolume, path, scale: int = 4):
    """Axial/coronal/sagittal mid-slices of a label volume as one PNG."""
    panels = []
    for sl in _mid_slices(seg.data):
        rgb = np.zeros(sl.shape + (3,), dtype=np.uint8)
        for l in np.unique(sl):
            if l:
                rgb[sl == l] = label_color(int(l))
        panels.append(rgb)
    _compose(panels, scale).save(path)


def render_weighted(atlas: ProbabilityAtlas, path, scale: int = 4):
    """Blend per-label frequencies into colors and render mid-slices."""
    shape = atlas.maxprob.grid.dims[:3]
    blended = np.zeros(shape + (3,), dtype=np.float64)
    for l in atlas.counts:
        freq = atlas.counts[l] / atlas.n_subjects
        blended += freq[..., None] * label_color(l).astype(np.float64)
    blended = np.clip(blended, 0, 255).astype(np.uint8)
    panels = [blended[shape[0] // 2], blended[:, shape[1] // 2], blended[:, :, shape[2] // 2]]
    _compose(panels, scale).save(path)

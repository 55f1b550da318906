"""Synthetic subjects with known ground truth.

Every pipeline in the toolkit is verified against these phantoms: an
ellipsoidal "thalamus" tiled by contiguous core + angular-wedge parcels,
with structural contrast, tensor-model diffusion signal, and region-wise
latent BOLD time courses.  All generators are pure functions of
(spec, seed); the PRNG is numpy's PCG64 with fixed per-generator
SeedSequence spawn keys, so reruns are bit-identical within one build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .fod import GradientTable
from .fusion import AtlasPrior
from .icp import TimeSeriesStack
from .volume import LabelVolume, Mask, Volume, geometry_of, resample_nearest, trilinear_resample

# spawn keys: one fixed PRNG stream per generator
_STREAM_TRUTH = 0
_STREAM_STRUCTURAL = 1
_STREAM_DWI = 2
_STREAM_BOLD = 3
_STREAM_PRIORS = 4

MEAN_DIFFUSIVITY = 7.0e-4  # mm^2/s, typical grey matter


@dataclass(frozen=True)
class PhantomSpec:
    grid_dims: tuple = (48, 48, 48)
    spacing: tuple = (1.0, 1.0, 1.0)
    n_regions: int = 11
    seed: int = 0
    noise_sigma: float = 0.0
    n_timepoints: int = 200
    n_directions: int = 64
    b_value: float = 1000.0
    tr_seconds: float = 0.7

    def __post_init__(self):
        object.__setattr__(self, "grid_dims", tuple(int(d) for d in self.grid_dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.n_regions < 2:
            raise ValueError(f"n_regions must be >= 2, got {self.n_regions}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class PhantomSubject:
    truth: LabelVolume
    mask: Mask
    structural: Volume
    dwi: Volume | None = None
    gradients: GradientTable | None = None
    bold: TimeSeriesStack | None = None
    latent_courses: np.ndarray | None = None


def _rng(spec: PhantomSpec, stream: int, extra: tuple = ()) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed, spawn_key=(stream, *extra))))


def _centered_affine(spec: PhantomSpec) -> np.ndarray:
    affine = np.diag([spec.spacing[0], spec.spacing[1], spec.spacing[2], 1.0])
    center = (np.asarray(spec.grid_dims) - 1) / 2.0 * np.asarray(spec.spacing)
    affine[:3, 3] = -center
    return affine


def _region_labels(spec: PhantomSpec, phase: float) -> np.ndarray:
    """Core + (n_regions - 1) azimuthal wedges of an ellipsoid.

    Wedge angular widths grow linearly, so parcel volumes are deliberately
    unequal; perfectly symmetric equal-volume tilings are a degenerate case
    for several of the estimators this phantom exercises.
    """
    dims = spec.grid_dims
    affine = _centered_affine(spec)
    ii, jj, kk = np.meshgrid(*(np.arange(d) for d in dims), indexing="ij")
    xyz = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3) @ affine[:3, :3].T + affine[:3, 3]
    half = (np.asarray(dims) - 1) / 2.0 * np.asarray(spec.spacing)
    semi = np.array([0.84, 0.72, 0.60]) * half
    rho = np.sqrt(((xyz / semi) ** 2).sum(axis=1))
    inside = rho <= 1.0

    n = spec.n_regions
    labels = np.zeros(int(np.prod(dims)), dtype=np.uint8)
    core_rho = (0.6 / n) ** (1.0 / 3.0)
    core = inside & (rho < core_rho)
    labels[core] = 1
    shell = inside & ~core
    if n == 2:
        labels[shell] = 2
    else:
        az = np.mod(np.arctan2(xyz[:, 1], xyz[:, 0]) + phase, 2 * np.pi)
        weights = np.arange(2, n + 1)
        edges = 2 * np.pi * np.cumsum(weights) / weights.sum()
        wedge = np.digitize(az, edges[:-1])
        labels[shell] = (wedge[shell] + 2).astype(np.uint8)
    return labels.reshape(dims)


def make_truth(spec: PhantomSpec) -> PhantomSubject:
    """Ground-truth parcellation, mask, and structural image for one subject.

    Parcel geometry is a pure function of (grid_dims, spacing, n_regions),
    so a cohort with one spec is anatomically aligned, standing in for
    co-registered subjects; the seed drives only intensity noise.  Raises
    ValueError when the grid is too small to hold ``n_regions`` nonempty
    parcels even after retrying a few wedge phase offsets.
    """
    base_phase = 0.5  # fixed: cohort shares one geometry
    min_voxels = max(1, int(np.prod(spec.grid_dims)) // 50000)
    data = None
    for attempt in range(8):
        cand = _region_labels(spec, base_phase + attempt * 0.37)
        counts = np.bincount(cand.reshape(-1), minlength=spec.n_regions + 1)[1:]
        if len(counts) >= spec.n_regions and counts.min() >= min_voxels:
            data = cand
            break
    if data is None:
        raise ValueError(
            f"grid {spec.grid_dims} too small to hold {spec.n_regions} nonempty parcels"
        )

    affine = _centered_affine(spec)
    grid = Volume(data, spec.spacing, affine)
    labels = {i + 1: f"region_{i + 1}" for i in range(spec.n_regions)}
    truth = LabelVolume(grid=grid, labels=labels)
    mask = Mask(grid=Volume((data > 0).astype(np.uint8), spec.spacing, affine))

    srng = _rng(spec, _STREAM_STRUCTURAL)
    means = 1.0 + np.arange(1, spec.n_regions + 1) / spec.n_regions
    intensity = np.zeros(data.shape, dtype=np.float64)
    intensity[data > 0] = means[data[data > 0] - 1]
    if spec.noise_sigma > 0:
        intensity[data > 0] += spec.noise_sigma * srng.standard_normal(int((data > 0).sum()))
    structural = Volume(intensity.astype(np.float32), spec.spacing, affine)
    return PhantomSubject(truth=truth, mask=mask, structural=structural)


def region_directions(n: int) -> np.ndarray:
    """n well-separated unit vectors (upper hemisphere golden spiral)."""
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - i / n)  # upper hemisphere only
    azim = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.c_[np.sin(polar) * np.cos(azim), np.sin(polar) * np.sin(azim), np.cos(polar)]


def uniform_directions(n: int) -> np.ndarray:
    """n quasi-uniform unit vectors over the full sphere (golden spiral)."""
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azim = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.c_[np.sin(polar) * np.cos(azim), np.sin(polar) * np.sin(azim), np.cos(polar)]


def region_tensor(direction, fa: float, md: float = MEAN_DIFFUSIVITY) -> np.ndarray:
    """Axially symmetric diffusion tensor with given principal axis and FA."""
    e = np.asarray(direction, dtype=np.float64)
    e = e / np.linalg.norm(e)
    delta = fa / np.sqrt(3.0 - 2.0 * fa * fa)
    lam_par = md * (1.0 + 2.0 * delta)
    lam_perp = md * (1.0 - delta)
    return lam_perp * np.eye(3) + (lam_par - lam_perp) * np.outer(e, e)


def make_dwi(subject: PhantomSubject, spec: PhantomSpec):
    """Tensor-model diffusion signal: three b=0 volumes then n_directions DWIs.

    Per region r the noiseless signal is S0 * exp(-b g'D_r g) with S0 = 1,
    a distinct principal axis per region, and FA spread over [0.2, 0.6].
    Rician noise of width noise_sigma is applied to the magnitude.
    Returns (4D Volume, GradientTable).
    """
    if spec.n_directions < 28:
        raise ValueError(f"n_directions must be >= 28 for an overdetermined SH fit, got {spec.n_directions}")
    truth = subject.truth.data
    n = spec.n_regions
    dirs = uniform_directions(spec.n_directions)
    bvals = np.concatenate([np.zeros(3), np.full(spec.n_directions, spec.b_value)])
    directions = np.vstack([np.zeros((3, 3)), dirs])
    grads = GradientTable(directions=directions, bvals=bvals)

    axes = region_directions(n)
    fas = np.linspace(0.2, 0.6, n)
    n_vol = len(bvals)
    signal = np.zeros(truth.shape + (n_vol,), dtype=np.float64)
    signal[truth > 0, :3] = 1.0
    for r in range(1, n + 1):
        tensor = region_tensor(axes[r - 1], fas[r - 1])
        atten = np.exp(-spec.b_value * np.einsum("ij,jk,ik->i", dirs, tensor, dirs))
        signal[truth == r, 3:] = atten

    if spec.noise_sigma > 0:
        rng = _rng(spec, _STREAM_DWI)
        n1 = rng.standard_normal(signal.shape) * spec.noise_sigma
        n2 = rng.standard_normal(signal.shape) * spec.noise_sigma
        signal = np.sqrt((signal + n1) ** 2 + n2 ** 2)
        signal[truth == 0, :] = 0.0

    # kept at float64 so the noiseless signal matches the closed form to 1e-9
    dwi = Volume(signal, spec.spacing, subject.truth.grid.affine)
    subject.dwi = dwi
    subject.gradients = grads
    return dwi, grads


def _latent_courses(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Band-limited, mutually orthogonal, unit-variance region time courses."""
    t = spec.n_timepoints
    raw = gaussian_filter1d(rng.standard_normal((spec.n_regions, t)), sigma=3.0, axis=1, mode="wrap")
    raw -= raw.mean(axis=1, keepdims=True)
    # Gram-Schmidt: pairwise correlation becomes 0, comfortably under the 0.3 cap
    for r in range(spec.n_regions):
        for s in range(r):
            raw[r] -= (raw[r] @ raw[s]) / (raw[s] @ raw[s]) * raw[s]
        raw[r] -= raw[r].mean()
    sd = raw.std(axis=1, keepdims=True)
    if np.any(sd == 0):
        raise ValueError("degenerate latent course; increase n_timepoints")
    return raw / sd


def make_bold(subject: PhantomSubject, spec: PhantomSpec) -> TimeSeriesStack:
    """Region-latent BOLD series: voxel series = region course + white noise."""
    if spec.n_timepoints < 100:
        raise ValueError(f"n_timepoints must be >= 100, got {spec.n_timepoints}")
    rng = _rng(spec, _STREAM_BOLD)
    courses = _latent_courses(spec, rng)
    idx = subject.mask.indices()
    region = subject.truth.data[idx[:, 0], idx[:, 1], idx[:, 2]]
    series = courses[region - 1, :].astype(np.float64)
    if spec.noise_sigma > 0:
        series = series + spec.noise_sigma * rng.standard_normal(series.shape)
    stack = TimeSeriesStack(mask=subject.mask, series=series, tr_seconds=spec.tr_seconds)
    subject.bold = stack
    subject.latent_courses = courses
    return stack


def make_priors(subject: PhantomSubject, spec: PhantomSpec, n_priors: int, jitter_mm: float):
    """Simulated warped atlas priors: rigidly shifted copies of the subject.

    Each prior is the (structural, truth) pair shifted by a random direction
    of magnitude exactly jitter_mm, resampled back onto the subject grid
    (trilinear for intensity, nearest for labels), with Gaussian intensity
    noise of width spec.noise_sigma.
    """
    if n_priors < 1:
        raise ValueError("n_priors must be >= 1")
    rng = _rng(spec, _STREAM_PRIORS)
    target = geometry_of(subject.structural)
    priors = []
    for _ in range(n_priors):
        if jitter_mm > 0:
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            shift = jitter_mm * direction
        else:
            shift = np.zeros(3)
        shifted_affine = subject.structural.affine.copy()
        shifted_affine[:3, 3] += shift

        moved_int = Volume(subject.structural.data, spec.spacing, shifted_affine)
        moved_lab = LabelVolume(
            grid=Volume(subject.truth.data, spec.spacing, shifted_affine),
            labels=dict(subject.truth.labels),
        )
        intensity = trilinear_resample(moved_int, target)
        lab = resample_nearest(moved_lab, target)
        if spec.noise_sigma > 0:
            noisy = intensity.data + spec.noise_sigma * rng.standard_normal(intensity.data.shape)
            intensity = Volume(noisy.astype(np.float32), intensity.spacing, intensity.affine)
        priors.append(AtlasPrior(intensity=intensity, labels=lab))
    return priors


def make_subject(spec: PhantomSpec, with_dwi: bool = True, with_bold: bool = True) -> PhantomSubject:
    """Convenience: truth + structural, plus DWI and BOLD when requested."""
    subject = make_truth(spec)
    if with_dwi:
        make_dwi(subject, spec)
    if with_bold:
        make_bold(subject, spec)
    return subject

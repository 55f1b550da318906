"""Resting-state parcellation path: preprocessing, instantaneous-connectivity
unfolding, group ICA, dual regression, and hard parcellation.

Unfolding turns each voxel's standardized series into its element-wise
product with the standardized mask-mean series; the temporal mean of the
result equals that voxel's Pearson correlation with the mean series
(standardization uses the divisor-T convention to make the identity exact).
Group ICA concatenates subjects along time and extracts spatially
independent maps with a fixed-point iteration (tanh contrast, symmetric
decorrelation).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from sklearn.base import BaseEstimator

from .volume import LabelVolume, Mask, Volume, check_same_grid

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


class IcaConvergenceError(RuntimeError):
    """Fixed-point ICA failed to converge (raised only in strict mode)."""


@dataclass
class TimeSeriesStack:
    """Per-voxel time courses inside a mask; rows follow mask.indices()."""

    mask: Mask
    series: np.ndarray  # (n_voxels, T)
    tr_seconds: float = 0.7
    zero_variance: np.ndarray | None = None  # set by unfold()

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        if self.series.ndim != 2:
            raise ValueError("series must be (n_voxels, T)")
        if self.series.shape[0] != self.mask.n_voxels:
            raise ValueError(
                f"{self.series.shape[0]} series for {self.mask.n_voxels} masked voxels"
            )
        if self.series.shape[1] < 2:
            raise ValueError("need at least 2 time points")
        if self.tr_seconds <= 0:
            raise ValueError("tr_seconds must be > 0")

    @property
    def n_timepoints(self) -> int:
        return self.series.shape[1]


def stack_to_volume(stack: TimeSeriesStack) -> Volume:
    """Scatter a stack into a 4D volume (zeros outside the mask)."""
    grid = stack.mask.grid
    out = np.zeros(grid.dims[:3] + (stack.n_timepoints,), dtype=np.float32)
    idx = stack.mask.indices()
    out[idx[:, 0], idx[:, 1], idx[:, 2], :] = stack.series
    return Volume(out, grid.spacing, grid.affine)


def volume_to_stack(vol: Volume, mask: Mask, tr_seconds: float = 0.7) -> TimeSeriesStack:
    if not vol.is_4d:
        raise ValueError("expected a 4D volume")
    check_same_grid(vol, mask)
    idx = mask.indices()
    return TimeSeriesStack(mask=mask, series=vol.data[idx[:, 0], idx[:, 1], idx[:, 2], :], tr_seconds=tr_seconds)


@dataclass(frozen=True)
class PreprocConfig:
    fwhm_mm: float = 3.5
    highpass_hz: float = 0.01
    n_drop_initial: int = 4

    def __post_init__(self):
        if self.fwhm_mm < 0 or self.highpass_hz < 0 or self.n_drop_initial < 0:
            raise ValueError("preprocessing parameters must be >= 0")


def _standardize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Zero mean, unit variance with the divisor-T (population) convention."""
    mu = x.mean(axis=axis, keepdims=True)
    sd = x.std(axis=axis, keepdims=True)
    out = np.zeros_like(x, dtype=np.float64)
    np.divide(x - mu, sd, out=out, where=sd > 0)
    return out


def smooth_stack(stack: TimeSeriesStack, fwhm_mm: float) -> TimeSeriesStack:
    """Mask-normalized Gaussian spatial smoothing, frame by frame.

    sigma = FWHM / (2*sqrt(2 ln 2)) per axis, converted to voxels; values
    outside the mask contribute nothing (the kernel is renormalized over the
    mask), so a spatially constant frame stays exactly constant.
    """
    if fwhm_mm == 0:
        return stack
    grid = stack.mask.grid
    sigma_vox = [fwhm_mm * FWHM_TO_SIGMA / s for s in grid.spacing]
    idx = stack.mask.indices()
    mask_f = (stack.mask.data > 0).astype(np.float64)
    norm = gaussian_filter(mask_f, sigma_vox, mode="constant")
    norm_in = norm[idx[:, 0], idx[:, 1], idx[:, 2]]
    frame = np.zeros(grid.dims[:3], dtype=np.float64)
    out = np.empty_like(stack.series)
    for t in range(stack.n_timepoints):
        frame[:] = 0.0
        frame[idx[:, 0], idx[:, 1], idx[:, 2]] = stack.series[:, t]
        sm = gaussian_filter(frame, sigma_vox, mode="constant")
        out[:, t] = sm[idx[:, 0], idx[:, 1], idx[:, 2]] / norm_in
    return TimeSeriesStack(mask=stack.mask, series=out, tr_seconds=stack.tr_seconds)


def dct_drift_basis(n_timepoints: int, tr_seconds: float, highpass_hz: float) -> np.ndarray:
    """Discrete-cosine drift regressors with frequencies below highpass_hz.

    Column k (k >= 1) is cos(pi*(2t+1)*k / (2T)) with frequency
    k / (2*T*TR); the intercept is not included here.
    """
    t = np.arange(n_timepoints)
    n_k = int(np.ceil(2.0 * n_timepoints * tr_seconds * highpass_hz)) + 1
    cols = []
    for k in range(1, n_k):
        freq = k / (2.0 * n_timepoints * tr_seconds)
        if freq < highpass_hz:
            cols.append(np.cos(np.pi * (2 * t + 1) * k / (2.0 * n_timepoints)))
    if not cols:
        return np.empty((n_timepoints, 0))
    return np.column_stack(cols)


def detect_spikes(series: np.ndarray) -> np.ndarray:
    """Frames whose RMS difference to the mid-point reference frame strictly
    exceeds Q3 + 1.5*IQR of the RMS series."""
    t_mid = series.shape[1] // 2
    diff = series - series[:, [t_mid]]
    rms = np.sqrt((diff ** 2).mean(axis=0))
    q1, q3 = np.percentile(rms, [25.0, 75.0])
    threshold = q3 + 1.5 * (q3 - q1)
    return np.flatnonzero(rms > threshold)


def preprocess(raw: TimeSeriesStack, nuisance: np.ndarray | None = None,
               cfg: PreprocConfig | None = None) -> TimeSeriesStack:
    """Drop initial frames, smooth, then jointly regress out drift basis,
    nuisance regressors, and spike indicators; returns the residual stack.

    ``nuisance`` may have rows for the raw length (its first
    n_drop_initial rows are dropped too) or for the kept length.
    Inputs are assumed realigned; no motion correction happens here.
    """
    cfg = cfg or PreprocConfig()
    t_raw = raw.n_timepoints
    n_keep = t_raw - cfg.n_drop_initial
    if n_keep < 2:
        raise ValueError(f"only {n_keep} frames left after dropping {cfg.n_drop_initial}")

    series = raw.series[:, cfg.n_drop_initial:]
    if nuisance is not None:
        nuisance = np.asarray(nuisance, dtype=np.float64)
        if nuisance.ndim != 2:
            raise ValueError("nuisance must be 2D (T, R)")
        if nuisance.shape[0] == t_raw:
            nuisance = nuisance[cfg.n_drop_initial:]
        elif nuisance.shape[0] != n_keep:
            raise ValueError(
                f"nuisance has {nuisance.shape[0]} rows; expected {t_raw} or {n_keep}"
            )

    stack = TimeSeriesStack(mask=raw.mask, series=series, tr_seconds=raw.tr_seconds)
    stack = smooth_stack(stack, cfg.fwhm_mm)

    drift = dct_drift_basis(n_keep, raw.tr_seconds, cfg.highpass_hz)
    spikes = detect_spikes(stack.series)
    indicators = np.zeros((n_keep, len(spikes)))
    indicators[spikes, np.arange(len(spikes))] = 1.0

    design = [np.ones((n_keep, 1)), drift]
    if nuisance is not None and nuisance.shape[1] > 0:
        design.append(nuisance)
    design.append(indicators)
    design = np.hstack(design)
    if np.linalg.matrix_rank(design) >= n_keep:
        raise ValueError(
            f"design matrix rank {np.linalg.matrix_rank(design)} leaves no residual "
            f"degrees of freedom for {n_keep} frames"
        )

    beta, *_ = np.linalg.lstsq(design, stack.series.T, rcond=None)
    residuals = stack.series.T - design @ beta
    return TimeSeriesStack(mask=raw.mask, series=residuals.T, tr_seconds=raw.tr_seconds)


def unfold(stack: TimeSeriesStack) -> TimeSeriesStack:
    """Instantaneous-connectivity unfolding.

    M = standardized mask-mean series; each voxel's standardized series is
    multiplied element-wise by M.  Zero-variance voxels yield all-zero rows
    and are recorded on the returned stack's ``zero_variance`` index array.
    The temporal mean of each output row equals the voxel's Pearson
    correlation with the mask-mean series.
    """
    if stack.mask.n_voxels == 0:
        raise ValueError("mask is empty")
    m = stack.series.mean(axis=0)
    m_std = _standardize(m[None, :])[0]
    v_std = _standardize(stack.series, axis=1)
    unfolded = v_std * m_std[None, :]
    zero_var = np.flatnonzero(stack.series.std(axis=1) == 0)
    return TimeSeriesStack(
        mask=stack.mask, series=unfolded, tr_seconds=stack.tr_seconds, zero_variance=zero_var
    )


# ---------------------------------------------------------------------------
# Fixed-point ICA
# ---------------------------------------------------------------------------


def _symmetric_decorrelation(w: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(w @ w.T)
    vals = np.maximum(vals, 1e-15)
    return (vecs * (1.0 / np.sqrt(vals))) @ vecs.T @ w


class FixedPointIca(BaseEstimator):
    """Fixed-point ICA with tanh contrast and symmetric decorrelation.

    fit(X) expects samples in rows and mixtures in columns; components are
    sought independent across samples.  The unmixing starts from a
    PRNG-seeded random orthonormal matrix; non-convergence is reported via
    ``converged_`` (and a warning), with the best iterate retained.
    """

    def __init__(self, n_components=30, tol=1e-6, max_iter=500, random_state=0):
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        x = np.asarray(X, dtype=np.float64)
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        n_samples, n_features = x.shape
        k = self.n_components
        if n_features < k or n_samples < k:
            raise ValueError(f"need at least {k} mixtures and samples, got {x.shape}")

        self.mean_ = x.mean(axis=0)
        xc = x - self.mean_
        u, s, vt = np.linalg.svd(xc, full_matrices=False)
        rank = int((s > s[0] * max(x.shape) * np.finfo(float).eps).sum()) if s[0] > 0 else 0
        if rank < k:
            raise ValueError(f"data rank {rank} < n_components {k}")
        # whitened samples: k columns, unit variance, uncorrelated across samples
        z = u[:, :k] * np.sqrt(n_samples)

        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.random_state)))
        w = _symmetric_decorrelation(rng.standard_normal((k, k)))

        zt = z.T  # (k, n_samples)
        self.converged_ = False
        for it in range(self.max_iter):
            wx = w @ zt
            g = np.tanh(wx)
            g_prime = 1.0 - g ** 2
            w_new = (g @ z) / n_samples - g_prime.mean(axis=1)[:, None] * w
            w_new = _symmetric_decorrelation(w_new)
            lim = np.abs(np.abs((w_new * w).sum(axis=1)) - 1.0).max()
            w = w_new
            if lim < self.tol:
                self.converged_ = True
                self.n_iter_ = it + 1
                break
        else:
            self.n_iter_ = self.max_iter
            warnings.warn(
                f"fixed-point ICA did not converge in {self.max_iter} iterations "
                f"(residual {lim:.2e}); returning the final iterate",
                RuntimeWarning,
            )

        self.unmixing_ = w
        # features -> components map, so transform(X) = (X - mean_) @ components_.T
        self.components_ = w @ (vt[:k] * (np.sqrt(n_samples) / s[:k])[:, None])
        self.sources_ = (w @ zt).T  # (n_samples, k)
        return self

    def transform(self, X):
        x = np.asarray(X, dtype=np.float64)
        return (x - self.mean_) @ self.components_.T

    def fit_transform(self, X, y=None):
        return self.fit(X).sources_


@dataclass
class GroupIcaResult:
    """Spatially independent group maps (z-scored over masked voxels)."""

    n_components: int
    maps: np.ndarray  # (k, n_voxels)
    mask: Mask
    converged: bool
    n_iter: int
    mixing_info: dict = field(default_factory=dict)


def _zscore_rows(maps: np.ndarray) -> np.ndarray:
    return _standardize(maps, axis=1)


def _skewness(x: np.ndarray) -> float:
    c = x - x.mean()
    sd = c.std()
    if sd == 0:
        return 0.0
    return float((c ** 3).mean() / sd ** 3)


def group_ica(stacks, n_components: int = 30, seed: int = 0, tol: float = 1e-6,
              max_iter: int = 500, strict: bool = False) -> GroupIcaResult:
    """Temporal-concatenation group ICA over unfolded stacks on one grid.

    Subjects are concatenated along time into a voxels x sum(T) matrix,
    voxel rows are variance-normalized, the time dimension is reduced to
    n_components principal components, and fixed-point ICA extracts
    spatially independent maps.  Each map is z-scored across voxels and
    sign-fixed so its skewness is >= 0.
    """
    stacks = list(stacks)
    if not stacks:
        raise ValueError("at least one subject is required")
    ref = stacks[0].mask
    for s in stacks[1:]:
        check_same_grid(s.mask, ref)
        if not np.array_equal(s.mask.data, ref.data):
            raise ValueError("subjects must share one mask")
    x = np.hstack([s.series for s in stacks])  # (voxels, sum T)
    if x.shape[1] < n_components:
        raise ValueError(f"total time {x.shape[1]} < n_components {n_components}")

    sd = x.std(axis=1, keepdims=True)
    xn = np.divide(x, sd, out=np.zeros_like(x), where=sd > 0)

    ica = FixedPointIca(n_components=n_components, tol=tol, max_iter=max_iter, random_state=seed)
    sources = ica.fit_transform(xn)  # (voxels, k)
    if strict and not ica.converged_:
        raise IcaConvergenceError(f"ICA did not converge in {max_iter} iterations")

    maps = _zscore_rows(sources.T)
    for k in range(n_components):
        if _skewness(maps[k]) < 0:
            maps[k] = -maps[k]
    if not np.isfinite(maps).all():
        raise ValueError("group maps contain non-finite values")
    return GroupIcaResult(
        n_components=n_components,
        maps=maps,
        mask=ref,
        converged=ica.converged_,
        n_iter=ica.n_iter_,
        mixing_info={
            "unmixing": ica.unmixing_,
            "components": ica.components_,  # time -> component map, (k, sum T)
            "mean": ica.mean_,
        },
    )


def dual_regression(subject: TimeSeriesStack, group_maps) -> tuple:
    """Two-stage least squares from group maps to subject maps.

    Stage 1 regresses each time point's voxel vector on the group maps
    (plus intercept) to get subject time courses; stage 2 regresses each
    voxel's series on those courses (plus intercept) to get subject maps.
    Returns (time_courses (T, K), subject_maps (K, n_voxels)).
    """
    maps = group_maps.maps if isinstance(group_maps, GroupIcaResult) else np.asarray(group_maps, dtype=np.float64)
    if isinstance(group_maps, GroupIcaResult):
        check_same_grid(subject.mask, group_maps.mask)
    k, n_vox = maps.shape
    if n_vox != subject.mask.n_voxels:
        raise ValueError(f"group maps cover {n_vox} voxels, subject has {subject.mask.n_voxels}")

    design1 = np.column_stack([maps.T, np.ones(n_vox)])
    if np.linalg.matrix_rank(design1) < k + 1:
        raise ValueError("group maps are collinear; stage-1 design is rank deficient")
    beta1, *_ = np.linalg.lstsq(design1, subject.series, rcond=None)  # (k+1, T)
    time_courses = beta1[:k].T  # (T, k)

    design2 = np.column_stack([time_courses, np.ones(subject.n_timepoints)])
    beta2, *_ = np.linalg.lstsq(design2, subject.series.T, rcond=None)  # (k+1, voxels)
    subject_maps = beta2[:k]
    return time_courses, subject_maps


def hard_parcellate(subject_maps: np.ndarray, mask: Mask):
    """Winner-take-all parcellation of subject maps.

    Maps are z-scored across masked voxels; each voxel takes the component
    with the largest z (ties to the lower component index), labels 1..K.
    """
    maps = np.asarray(subject_maps, dtype=np.float64)
    if maps.ndim != 2 or maps.shape[1] != mask.n_voxels:
        raise ValueError("subject_maps must be (K, n_masked_voxels)")
    z = _zscore_rows(maps)
    winner = z.argmax(axis=0) + 1  # argmax takes the first (lower) index on ties

    out = np.zeros(mask.grid.dims[:3], dtype=np.uint8 if maps.shape[0] <= 255 else np.int16)
    idx = mask.indices()
    out[idx[:, 0], idx[:, 1], idx[:, 2]] = winner
    grid = Volume(out, mask.grid.spacing, mask.grid.affine)
    return LabelVolume(grid=grid, labels={i: f"component_{i}" for i in range(1, maps.shape[0] + 1)})

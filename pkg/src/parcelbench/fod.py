"""Q-ball diffusion reconstruction on a real symmetric SH basis.

Per-voxel attenuation profiles are fit with regularized least squares on an
even-order real spherical-harmonic basis (order 6 -> 28 coefficients), then
mapped through the Funk-Radon transform, which in SH space is the diagonal
scaling c_lm -> 2*pi*P_l(0)*c_lm.  Fields of coefficients are stored over a
mask and can be upsampled channel-by-channel to an isotropic grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import sph_harm_y

from .volume import (
    Geometry,
    Mask,
    Volume,
    check_same_grid,
    read_nifti,
    resample_nearest,
    trilinear_resample,
    voxel_to_world,
    write_nifti,
    LabelVolume,
)

B0_THRESHOLD = 10.0  # s/mm^2; entries at or below count as b=0


@dataclass(frozen=True)
class GradientTable:
    """Diffusion sampling scheme: one direction + b-value per volume."""

    directions: np.ndarray  # (n, 3)
    bvals: np.ndarray  # (n,)

    def __post_init__(self):
        directions = np.asarray(self.directions, dtype=np.float64)
        bvals = np.asarray(self.bvals, dtype=np.float64)
        if directions.ndim != 2 or directions.shape[1] != 3 or len(directions) != len(bvals):
            raise ValueError("directions must be (n, 3) matching bvals length")
        dwi = bvals > B0_THRESHOLD
        norms = np.linalg.norm(directions[dwi], axis=1)
        if dwi.any() and np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("nonzero-b directions must be unit norm to 1e-6")
        object.__setattr__(self, "directions", directions)
        object.__setattr__(self, "bvals", bvals)

    @property
    def b0_mask(self) -> np.ndarray:
        return self.bvals <= B0_THRESHOLD

    @property
    def dwi_mask(self) -> np.ndarray:
        return self.bvals > B0_THRESHOLD


def save_gradient_table(grads: GradientTable, path):
    """Plain-text scheme file: one `gx gy gz b` line per volume."""
    rows = np.column_stack([grads.directions, grads.bvals])
    np.savetxt(path, rows, fmt="%.10g")


def load_gradient_table(path) -> GradientTable:
    rows = np.atleast_2d(np.loadtxt(path))
    if rows.shape[1] != 4:
        raise ValueError(f"gradient table must have 4 columns (gx gy gz b), got {rows.shape[1]}")
    return GradientTable(directions=rows[:, :3], bvals=rows[:, 3])


@dataclass(frozen=True)
class ShBasis:
    """Real symmetric spherical-harmonic basis of even order.

    Index j runs over (l, m) pairs in ascending l then m; the real functions
    are sqrt(2)*Im(Y_l^|m|) for m < 0, Y_l^0 for m = 0, and
    sqrt(2)*Re(Y_l^m) for m > 0.  Order 6 gives 28 coefficients.
    """

    order: int = 6

    def __post_init__(self):
        if self.order < 0 or self.order % 2 != 0:
            raise ValueError(f"order must be even and >= 0, got {self.order}")

    @property
    def n_coeffs(self) -> int:
        return (self.order + 1) * (self.order + 2) // 2

    @property
    def lm_pairs(self):
        return [(l, m) for l in range(0, self.order + 1, 2) for m in range(-l, l + 1)]

    @property
    def degrees(self) -> np.ndarray:
        """l of each coefficient, shape (n_coeffs,)."""
        return np.array([l for l, _ in self.lm_pairs])


def sh_design_matrix(basis: ShBasis, dirs) -> np.ndarray:
    """Evaluate the basis at unit directions: B[i, j] = Y_j(dir_i).

    Requires at least n_coeffs directions so the LS system is determined.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.ndim != 2 or dirs.shape[1] != 3:
        raise ValueError("dirs must be (n, 3)")
    if len(dirs) < basis.n_coeffs:
        raise ValueError(f"need >= {basis.n_coeffs} directions, got {len(dirs)}")
    x, y, z = dirs.T
    polar = np.arccos(np.clip(z / np.linalg.norm(dirs, axis=1), -1.0, 1.0))
    azim = np.arctan2(y, x)
    cols = []
    for l, m in basis.lm_pairs:
        ylm = sph_harm_y(l, abs(m), polar, azim)
        if m < 0:
            cols.append(np.sqrt(2.0) * ylm.imag)
        elif m == 0:
            cols.append(ylm.real)
        else:
            cols.append(np.sqrt(2.0) * ylm.real)
    return np.stack(cols, axis=1)


def fit_sh(signal, dirs, basis: ShBasis | None = None, lambda_lb: float = 0.006) -> np.ndarray:
    """Laplace-Beltrami-regularized least-squares SH fit of one profile.

    Solves c = (B'B + lambda * L'L)^-1 B' s with L = diag(l(l+1)).
    """
    basis = basis or ShBasis()
    B = sh_design_matrix(basis, dirs)
    return _solve_sh(B, np.asarray(signal, dtype=np.float64).reshape(-1, 1), basis, lambda_lb)[0]


def _solve_sh(B: np.ndarray, signals: np.ndarray, basis: ShBasis, lambda_lb: float) -> np.ndarray:
    """Fit many profiles at once; signals is (n_dirs, n_profiles)."""
    if lambda_lb < 0:
        raise ValueError("lambda_lb must be >= 0")
    l = basis.degrees.astype(np.float64)
    penalty = np.diag((l * (l + 1.0)) ** 2)
    normal = B.T @ B + lambda_lb * penalty
    coeffs = np.linalg.solve(normal, B.T @ signals)
    return coeffs.T  # (n_profiles, n_coeffs)


def legendre_at_zero(l: int) -> float:
    """P_l(0) for even l: (-1)^(l/2) (l-1)!! / l!!, exact as a float ratio."""
    if l % 2 != 0:
        return 0.0
    num, den = 1, 1
    for k in range(1, l, 2):
        num *= k
    for k in range(2, l + 1, 2):
        den *= k
    return (-1.0) ** (l // 2) * num / den


def funk_radon(coeffs, basis: ShBasis | None = None) -> np.ndarray:
    """Funk-Radon transform in SH space: scale degree-l terms by 2*pi*P_l(0)."""
    basis = basis or ShBasis()
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-1] != basis.n_coeffs:
        raise ValueError(f"expected last axis {basis.n_coeffs}, got {coeffs.shape[-1]}")
    factors = np.array([2.0 * np.pi * legendre_at_zero(l) for l in basis.degrees])
    return coeffs * factors


@dataclass
class ShField:
    """Per-voxel SH coefficients over a mask; geometry inherited from it."""

    mask: Mask
    coeffs: np.ndarray  # (n_masked_voxels, n_coeffs), rows follow mask.indices()
    basis: ShBasis = field(default_factory=ShBasis)
    skipped: np.ndarray = field(default_factory=lambda: np.empty((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 2 or self.coeffs.shape[1] != self.basis.n_coeffs:
            raise ValueError(f"coeffs must be (n, {self.basis.n_coeffs})")
        if self.coeffs.shape[0] != self.mask.n_voxels:
            raise ValueError("one coefficient row per masked voxel required")

    @property
    def n_voxels(self) -> int:
        return self.coeffs.shape[0]

    def positions_mm(self) -> np.ndarray:
        return voxel_to_world(self.mask.grid.affine, self.mask.indices())


def fit_field(dwi: Volume, grads: GradientTable, mask: Mask, basis: ShBasis | None = None,
              lambda_lb: float = 0.006, use_frt: bool = True) -> ShField:
    """Fit the SH field over a masked 4D acquisition.

    Per masked voxel: S0 = mean of the b=0 volumes, attenuation = dwi/S0 on
    the nonzero-b volumes, regularized SH fit, then (by default) the
    Funk-Radon scaling.  Voxels with S0 <= 0 get zero coefficients and land
    on the field's skip list.
    """
    basis = basis or ShBasis()
    if not dwi.is_4d or dwi.dims[3] != len(grads.bvals):
        raise ValueError(
            f"dwi has {dwi.dims[3] if dwi.is_4d else 1} volumes but the gradient table lists {len(grads.bvals)}"
        )
    check_same_grid(dwi, mask)
    if int(grads.dwi_mask.sum()) < basis.n_coeffs:
        raise ValueError(f"need >= {basis.n_coeffs} nonzero-b volumes, got {int(grads.dwi_mask.sum())}")

    idx = mask.indices()
    series = dwi.data[idx[:, 0], idx[:, 1], idx[:, 2], :].astype(np.float64)  # (n, n_vol)
    s0 = series[:, grads.b0_mask].mean(axis=1)
    ok = s0 > 0.0
    atten = np.zeros((len(idx), int(grads.dwi_mask.sum())))
    atten[ok] = series[np.ix_(ok, grads.dwi_mask)] / s0[ok, None]

    B = sh_design_matrix(basis, grads.directions[grads.dwi_mask])
    coeffs = np.zeros((len(idx), basis.n_coeffs))
    if ok.any():
        coeffs[ok] = _solve_sh(B, atten[ok].T, basis, lambda_lb)
        if use_frt:
            coeffs[ok] = funk_radon(coeffs[ok], basis)
    return ShField(mask=mask, coeffs=coeffs, basis=basis, skipped=idx[~ok])


def isotropic_geometry(field: ShField, spacing_mm: float = 1.0, pad_voxels: int = 1) -> Geometry:
    """Axis-aligned isotropic grid covering the field's mask bounding box."""
    idx = field.mask.indices()
    corners = []
    lo_i, hi_i = idx.min(axis=0), idx.max(axis=0)
    for ci in (lo_i, hi_i):
        for cj in (lo_i, hi_i):
            for ck in (lo_i, hi_i):
                corners.append([ci[0], cj[1], ck[2]])
    world = voxel_to_world(field.mask.grid.affine, np.asarray(corners, dtype=np.float64))
    lo = world.min(axis=0) - pad_voxels * spacing_mm
    hi = world.max(axis=0) + pad_voxels * spacing_mm
    dims = np.maximum(np.ceil((hi - lo) / spacing_mm).astype(int) + 1, 1)
    affine = np.diag([spacing_mm, spacing_mm, spacing_mm, 1.0])
    affine[:3, 3] = lo
    return Geometry(tuple(dims), (spacing_mm,) * 3, affine)


def upsample_field(field: ShField, target: Geometry) -> ShField:
    """Resample an SH field onto a new grid.

    Each coefficient channel is interpolated trilinearly; the mask moves by
    nearest neighbor, and coefficients outside the new mask are dropped.
    """
    src_mask = field.mask
    new_mask_lab = resample_nearest(
        LabelVolume(grid=Volume(src_mask.data.astype(np.uint8), src_mask.grid.spacing, src_mask.grid.affine),
                    labels={1: "mask"}),
        target,
    )
    new_mask = Mask(grid=new_mask_lab.grid)

    coeff_vol = np.zeros(src_mask.grid.dims[:3] + (field.basis.n_coeffs,), dtype=np.float64)
    idx = src_mask.indices()
    coeff_vol[idx[:, 0], idx[:, 1], idx[:, 2], :] = field.coeffs
    src4 = Volume(coeff_vol.astype(np.float32), src_mask.grid.spacing, src_mask.grid.affine)
    res = trilinear_resample(src4, target)
    new_idx = new_mask.indices()
    coeffs = res.data[new_idx[:, 0], new_idx[:, 1], new_idx[:, 2], :].astype(np.float64)
    return ShField(mask=new_mask, coeffs=coeffs, basis=field.basis)


def save_field(field: ShField, coeff_path, mask_path):
    """Serialize as a 4D coefficient NIfTI (nt = n_coeffs) plus a mask NIfTI."""
    vol = np.zeros(field.mask.grid.dims[:3] + (field.basis.n_coeffs,), dtype=np.float32)
    idx = field.mask.indices()
    vol[idx[:, 0], idx[:, 1], idx[:, 2], :] = field.coeffs
    write_nifti(Volume(vol, field.mask.grid.spacing, field.mask.grid.affine), coeff_path)
    write_nifti(field.mask, mask_path)


def load_field(coeff_path, mask_path, basis: ShBasis | None = None) -> ShField:
    vol = read_nifti(coeff_path)
    mask_vol = read_nifti(mask_path)
    mask = Mask(grid=mask_vol)
    basis = basis or ShBasis()
    if not vol.is_4d or vol.dims[3] != basis.n_coeffs:
        raise ValueError(f"coefficient volume must be 4D with nt={basis.n_coeffs}")
    check_same_grid(vol, mask)
    idx = mask.indices()
    coeffs = vol.data[idx[:, 0], idx[:, 1], idx[:, 2], :].astype(np.float64)
    return ShField(mask=mask, coeffs=coeffs, basis=basis)

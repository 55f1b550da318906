"""Voxel-grid data model, grid geometry, and single-file NIfTI-1 I/O.

Scope is deliberately narrow: little-endian NIfTI-1 (`.nii`, with `.nii.gz`
read and written through transparent gzip), datatypes uint8 / int16 /
float32, sform-carried affines.  Everything else in the toolkit moves its
voxel data through the types defined here.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

NIFTI1_HEADER_SIZE = 348
NIFTI1_VOX_OFFSET = 352
NIFTI1_MAGIC = b"n+1\x00"

_DTYPE_FOR_CODE = {2: np.dtype(np.uint8), 4: np.dtype(np.int16), 16: np.dtype(np.float32)}
_CODE_FOR_DTYPE = {v: k for k, v in _DTYPE_FOR_CODE.items()}
_BITPIX_FOR_CODE = {2: 8, 4: 16, 16: 32}

# Canonical label dictionary: 11 thalamic nuclei, background is always 0.
THALAMIC_NUCLEI = {
    1: "AV",
    2: "CM",
    3: "Hb",
    4: "LGN",
    5: "MGN",
    6: "Md",
    7: "Pul",
    8: "VA",
    9: "VL",
    10: "VLa",
    11: "VPL",
}


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI-1 file; ``field`` names the header field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class GridMismatchError(ValueError):
    """Inputs that must share one voxel grid have different dims or affines."""


def validate_affine(m) -> np.ndarray:
    """Check a 4x4 voxel-index -> world-mm map and return it as float64.

    The bottom row must be exactly [0, 0, 0, 1] and the upper-left 3x3
    block must be invertible.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {m.shape}")
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValueError(f"affine bottom row must be [0,0,0,1], got {m[3]}")
    if np.linalg.det(m[:3, :3]) == 0.0:
        raise ValueError("affine 3x3 block is singular")
    return m


def voxel_to_world(affine, idx):
    """Map voxel indices (..., 3) through the affine to world mm (..., 3)."""
    idx = np.asarray(idx, dtype=np.float64)
    return idx @ np.asarray(affine)[:3, :3].T + np.asarray(affine)[:3, 3]


def world_to_voxel(affine, xyz):
    """Inverse of :func:`voxel_to_world`; returns fractional voxel coordinates."""
    inv = np.linalg.inv(np.asarray(affine, dtype=np.float64))
    xyz = np.asarray(xyz, dtype=np.float64)
    return xyz @ inv[:3, :3].T + inv[:3, 3]


@dataclass(frozen=True)
class Volume:
    """A 3D or 4D scalar grid with spacing and a voxel-to-world affine.

    ``data`` is indexed ``[i, j, k]`` (or ``[i, j, k, t]``); on disk the
    layout is x-fastest.  Volumes are immutable after construction.
    """

    data: np.ndarray
    spacing: tuple
    affine: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim not in (3, 4):
            raise ValueError(f"volume data must be 3D or 4D, got ndim={data.ndim}")
        if min(data.shape) < 1:
            raise ValueError(f"all dims must be >= 1, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3:
            raise ValueError("spacing must have 3 entries")
        if min(spacing) <= 0.0:
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        affine = validate_affine(self.affine)
        norms = np.linalg.norm(affine[:3, :3], axis=0)
        rel = np.abs(norms - np.asarray(spacing)) / np.asarray(spacing)
        if rel.max() > 1e-4:
            raise ValueError(
                f"spacing {spacing} inconsistent with affine column norms {tuple(norms)}"
            )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def is_4d(self) -> bool:
        return self.data.ndim == 4


@dataclass(frozen=True)
class LabelVolume:
    """Integer-labelled volume plus a label dictionary; background id is 0."""

    grid: Volume
    labels: dict

    def __post_init__(self):
        if self.grid.is_4d:
            raise ValueError("label volumes must be 3D")
        if not np.issubdtype(self.grid.data.dtype, np.integer):
            raise ValueError(f"label data must be integer, got {self.grid.data.dtype}")
        labels = {int(k): str(v) for k, v in self.labels.items()}
        if 0 in labels:
            raise ValueError("0 is reserved for background and cannot be a label id")
        present = set(np.unique(self.grid.data).tolist()) - {0}
        missing = present - set(labels)
        if missing:
            raise ValueError(f"label ids {sorted(missing)} present in data but not in dictionary")
        object.__setattr__(self, "labels", labels)

    @property
    def data(self) -> np.ndarray:
        return self.grid.data

    def ids_present(self):
        return sorted(int(v) for v in np.unique(self.grid.data) if v != 0)


@dataclass(frozen=True)
class Mask:
    """Binary volume (values in {0, 1}) delimiting a region of interest."""

    grid: Volume

    def __post_init__(self):
        vals = np.unique(self.grid.data)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError(f"mask values must be 0/1, found {vals[:8]}")

    @property
    def data(self) -> np.ndarray:
        return self.grid.data

    def indices(self) -> np.ndarray:
        """Voxel indices (n, 3) of mask interior, lexicographic order."""
        return np.argwhere(self.grid.data > 0)

    @property
    def n_voxels(self) -> int:
        return int(np.count_nonzero(self.grid.data))


@dataclass(frozen=True)
class Geometry:
    """Target grid for resampling: dims, spacing, and affine."""

    dims: tuple
    spacing: tuple
    affine: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "affine", validate_affine(self.affine))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"geometry dims must be 3 positive ints, got {self.dims}")


def geometry_of(v) -> Geometry:
    grid = v.grid if isinstance(v, (LabelVolume, Mask)) else v
    return Geometry(grid.dims[:3], grid.spacing, grid.affine)


def check_same_grid(*items):
    """Raise GridMismatchError unless all items share dims[:3] and affine."""
    grids = [it.grid if isinstance(it, (LabelVolume, Mask)) else it for it in items]
    ref = grids[0]
    for g in grids[1:]:
        if g.dims[:3] != ref.dims[:3]:
            raise GridMismatchError(f"dims differ: {g.dims[:3]} vs {ref.dims[:3]}")
        if not np.allclose(g.affine, ref.affine, atol=1e-6):
            raise GridMismatchError("affines differ")


# ---------------------------------------------------------------------------
# NIfTI-1 codec
# ---------------------------------------------------------------------------


def _read_raw(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.GzipFile(fileobj=fh) as gz:
                return gz.read()
        return fh.read()


def _quaternion_affine(hdr_floats, spacing, qfac):
    b, c, d, ox, oy, oz = hdr_floats
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    scale = np.array([spacing[0], spacing[1], qfac * spacing[2]])
    affine = np.eye(4)
    affine[:3, :3] = rot * scale
    affine[:3, 3] = (ox, oy, oz)
    return affine


def read_nifti(path, as_labels: bool = False, labels: dict | None = None):
    """Read a single-file little-endian NIfTI-1 volume.

    The affine is taken from the sform when its code is positive, else from
    the qform, else a spacing diagonal.  With ``as_labels=True`` an integer
    file is returned as a :class:`LabelVolume` (``labels`` supplies names;
    defaults to ``region_<id>``).
    """
    raw = _read_raw(path)
    if len(raw) < NIFTI1_HEADER_SIZE:
        raise NiftiError("sizeof_hdr", f"file shorter than the {NIFTI1_HEADER_SIZE}-byte header")
    if raw[344:348] != NIFTI1_MAGIC:
        raise NiftiError("magic", f"expected {NIFTI1_MAGIC!r} at offset 344, got {raw[344:348]!r}")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != NIFTI1_HEADER_SIZE:
        raise NiftiError("sizeof_hdr", f"expected {NIFTI1_HEADER_SIZE} (little-endian), got {sizeof_hdr}")

    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise NiftiError("dim", f"only 3D/4D volumes supported, dim[0]={ndim}")
    dims = dim[1 : 1 + ndim]
    if min(dims) < 1:
        raise NiftiError("dim", f"all dims must be >= 1, got {dims}")

    datatype = struct.unpack_from("<h", raw, 70)[0]
    if datatype not in _DTYPE_FOR_CODE:
        raise NiftiError("datatype", f"unsupported datatype code {datatype} (want uint8/int16/float32)")
    dtype = _DTYPE_FOR_CODE[datatype]

    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = pixdim[1:4]
    if min(spacing) <= 0.0:
        raise NiftiError("pixdim", f"non-positive spacing {spacing}")

    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    if vox_offset < NIFTI1_HEADER_SIZE:
        raise NiftiError("vox_offset", f"vox_offset {vox_offset} precedes header end")
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)
    qform_code, sform_code = struct.unpack_from("<2h", raw, 252)

    n_values = int(np.prod(dims))
    n_bytes = n_values * dtype.itemsize
    payload = raw[vox_offset : vox_offset + n_bytes]
    if len(payload) < n_bytes:
        raise NiftiError("vox_offset", f"data section truncated: need {n_bytes} bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F").copy()

    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        data = data.astype(np.float32) * np.float32(scl_slope) + np.float32(scl_inter)

    if sform_code > 0:
        srow = struct.unpack_from("<12f", raw, 280)
        affine = np.vstack([np.asarray(srow, dtype=np.float64).reshape(3, 4), [0, 0, 0, 1]])
    elif qform_code > 0:
        quat = struct.unpack_from("<6f", raw, 256)
        qfac = -1.0 if pixdim[0] == -1.0 else 1.0
        affine = _quaternion_affine(quat, spacing, qfac)
    else:
        affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])

    vol = Volume(data=data, spacing=spacing, affine=affine)
    if not as_labels:
        return vol
    if not np.issubdtype(vol.data.dtype, np.integer):
        raise NiftiError("datatype", f"label volumes require an integer datatype, got code {datatype}")
    if labels is None:
        labels = {int(i): f"region_{int(i)}" for i in np.unique(vol.data) if i != 0}
    return LabelVolume(grid=vol, labels=labels)


def write_nifti(v, path):
    """Write a Volume/LabelVolume/Mask as single-file NIfTI-1.

    Volumes are stored as float32, label volumes and masks as uint8 (int16
    when an id exceeds 255).  The affine goes into the sform (code 1),
    scl_slope/inter are 1/0, vox_offset is 352, so read_nifti round-trips
    the payload bit-exactly.  A ``.gz`` suffix gzips the stream (mtime 0,
    keeping outputs byte-reproducible).
    """
    grid = v.grid if isinstance(v, (LabelVolume, Mask)) else v
    if isinstance(v, (LabelVolume, Mask)):
        vmax = int(grid.data.max(initial=0))
        vmin = int(grid.data.min(initial=0))
        if vmin < 0 or vmax > 32767:
            raise NiftiError("datatype", f"label ids [{vmin}, {vmax}] exceed the int16 range")
        dtype = np.dtype(np.uint8) if vmax <= 255 else np.dtype(np.int16)
    else:
        dtype = np.dtype(np.float32)

    dims = grid.dims
    if max(dims) > 32767:
        raise NiftiError("dim", f"dims {dims} exceed the int16 header range")

    hdr = bytearray(NIFTI1_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI1_HEADER_SIZE)
    dim = [len(dims)] + list(dims) + [1] * (7 - len(dims))
    struct.pack_into("<8h", hdr, 40, *dim)
    code = _CODE_FOR_DTYPE[dtype]
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, _BITPIX_FOR_CODE[code])
    pixdim = [1.0] + list(grid.spacing) + [1.0, 1.0, 1.0, 1.0]
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(NIFTI1_VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<b", hdr, 123, 10)  # xyzt_units: mm | sec
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform on
    srow = grid.affine[:3, :].astype(np.float32).reshape(-1)
    struct.pack_into("<12f", hdr, 280, *srow)
    hdr[344:348] = NIFTI1_MAGIC

    payload = np.asfortranarray(grid.data.astype(dtype, copy=False)).tobytes(order="F")
    blob = bytes(hdr) + b"\x00" * (NIFTI1_VOX_OFFSET - NIFTI1_HEADER_SIZE) + payload
    path = str(path)
    if path.endswith(".gz"):
        with open(path, "wb") as fh:
            # filename and mtime pinned so identical volumes gzip identically
            with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(blob)
    else:
        with open(path, "wb") as fh:
            fh.write(blob)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _source_coords(src_affine, target: Geometry):
    """Fractional source-voxel coordinates of every target voxel center."""
    nx, ny, nz = target.dims
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(np.float64)
    t = np.linalg.inv(src_affine) @ target.affine
    return idx @ t[:3, :3].T + t[:3, 3]


def resample_nearest(src: LabelVolume, target: Geometry) -> LabelVolume:
    """Nearest-neighbor resampling of labels onto a target grid.

    Exactly equidistant coordinates resolve toward the lower voxel index;
    target voxels outside the source become background 0.
    """
    coords = _source_coords(src.grid.affine, target)
    # ceil(x - 0.5): rounds halves down, everything else to nearest
    idx = np.ceil(coords - 0.5).astype(np.int64)
    dims = np.asarray(src.grid.dims[:3])
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    out = np.zeros(int(np.prod(target.dims)), dtype=src.grid.data.dtype)
    sel = idx[inside]
    out[inside] = src.grid.data[sel[:, 0], sel[:, 1], sel[:, 2]]
    grid = Volume(out.reshape(target.dims), target.spacing, target.affine)
    return LabelVolume(grid=grid, labels=dict(src.labels))


def trilinear_resample(src: Volume, target: Geometry) -> Volume:
    """Trilinear resampling of a 3D or 4D volume onto a target grid.

    Each channel of a 4D volume is interpolated independently; contributions
    from outside the source count as 0.
    """
    coords = _source_coords(src.affine, target)
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    dims = np.asarray(src.dims[:3])

    n_t = int(np.prod(target.dims))
    if src.is_4d:
        acc = np.zeros((n_t, src.dims[3]), dtype=np.float64)
    else:
        acc = np.zeros(n_t, dtype=np.float64)

    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = base + (dx, dy, dz)
                w = (
                    (frac[:, 0] if dx else 1.0 - frac[:, 0])
                    * (frac[:, 1] if dy else 1.0 - frac[:, 1])
                    * (frac[:, 2] if dz else 1.0 - frac[:, 2])
                )
                inside = np.all((corner >= 0) & (corner < dims), axis=1)
                sel = corner[inside]
                vals = src.data[sel[:, 0], sel[:, 1], sel[:, 2]]
                if src.is_4d:
                    acc[inside] += w[inside, None] * vals
                else:
                    acc[inside] += w[inside] * vals

    shape = tuple(target.dims) + ((src.dims[3],) if src.is_4d else ())
    out = acc.reshape(shape).astype(np.float32)
    return Volume(out, target.spacing, target.affine)

"""Volumetric data model, NIfTI-1 I/O, and the image preprocessing chain."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

TARGET_SHAPE = (192, 224, 192)

_DT_UINT16 = 512
_DT_INT16 = 4
_DT_FLOAT32 = 16
_SUPPORTED_DATATYPES = {_DT_INT16: np.int16, _DT_UINT16: np.uint16,
                        _DT_FLOAT32: np.float32}


class NiftiError(IOError):
    pass


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedFileError(NiftiError):
    pass


class EmptyMaskError(ValueError):
    pass


@dataclass
class Volume:
    """3D scalar grid with world-space metadata.

    data is indexed [i, j, k]; voxel index v maps to world mm as
    origin + direction @ (spacing * v).
    """

    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.spacing = np.asarray(self.spacing, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"data must be a nonempty 3D array, got shape {self.data.shape}")
        if np.any(self.spacing <= 0):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if np.max(np.abs(self.direction @ self.direction.T - np.eye(3))) > 1e-4:
            raise ValueError("direction matrix is not orthonormal")

    @property
    def shape(self):
        return self.data.shape

    def voxel_to_world(self, idx) -> np.ndarray:
        return self.origin + self.direction @ (self.spacing * np.asarray(idx, dtype=np.float64))

    def world_to_voxel(self, xyz) -> np.ndarray:
        return (self.direction.T @ (np.asarray(xyz, dtype=np.float64) - self.origin)) / self.spacing


# ---------------------------------------------------------------------------
# NIfTI-1 (uncompressed, single-file) reader/writer
# ---------------------------------------------------------------------------

def read_nifti(path) -> Volume:
    """Read an uncompressed NIfTI-1 file.

    Honors dim, pixdim, datatype, the sform rows, and scl_slope/scl_inter
    (applied when slope is neither 0 nor 1, or when inter is nonzero,
    promoting to float32).
    """
    with open(path, "rb") as f:
        hdr = f.read(348)
        if len(hdr) < 348:
            raise TruncatedFileError(f"{path}: header shorter than 348 bytes")
        magic = hdr[344:348]
        if magic not in (b"n+1\x00", b"ni1\x00"):
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        dim = struct.unpack_from("<8h", hdr, 40)
        datatype, bitpix = struct.unpack_from("<2h", hdr, 70)
        pixdim = struct.unpack_from("<8f", hdr, 76)
        vox_offset, scl_slope, scl_inter = struct.unpack_from("<3f", hdr, 108)
        srow = np.array(struct.unpack_from("<12f", hdr, 280),
                        dtype=np.float64).reshape(3, 4)
        if datatype not in _SUPPORTED_DATATYPES:
            raise UnsupportedDatatypeError(f"{path}: datatype code {datatype}")
        if dim[0] < 3 or min(dim[1:4]) < 1:
            raise NiftiError(f"{path}: bad dim field {dim}")
        nx, ny, nz = dim[1], dim[2], dim[3]
        dtype = _SUPPORTED_DATATYPES[datatype]
        nbytes = nx * ny * nz * np.dtype(dtype).itemsize
        f.seek(int(vox_offset) if vox_offset >= 348 else 352)
        raw = f.read(nbytes)
        if len(raw) < nbytes:
            raise TruncatedFileError(f"{path}: expected {nbytes} data bytes, got {len(raw)}")
    # NIfTI stores x fastest; Fortran order gives data[i, j, k]
    data = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"))
    data = data.reshape((nx, ny, nz), order="F")
    if (scl_slope not in (0.0, 1.0)) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = (slope * data.astype(np.float32) + np.float32(scl_inter))
    spacing = np.abs(np.array(pixdim[1:4], dtype=np.float64))
    spacing[spacing == 0] = 1.0
    if np.any(srow[:, :3]):
        direction = srow[:, :3] / spacing[np.newaxis, :]
        origin = srow[:, 3].copy()
    else:
        direction = np.eye(3)
        origin = np.zeros(3)
    return Volume(data=np.ascontiguousarray(data), spacing=spacing,
                  direction=direction, origin=origin)


def write_nifti(v: Volume, path) -> None:
    """Write an uncompressed NIfTI-1 file; inverse of read_nifti."""
    data = v.data
    if data.dtype == np.uint16:
        datatype, bitpix = _DT_UINT16, 16
    elif data.dtype == np.int16:
        datatype, bitpix = _DT_INT16, 16
    else:
        data = data.astype(np.float32)
        datatype, bitpix = _DT_FLOAT32, 32
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)                       # sizeof_hdr
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, 352.0, 1.0, 0.0)        # vox_offset, scl
    struct.pack_into("<h", hdr, 254, 1)                       # sform_code
    srow = np.concatenate([v.direction * v.spacing[np.newaxis, :],
                           v.origin[:, np.newaxis]], axis=1)
    struct.pack_into("<12f", hdr, 280, *srow.ravel())
    hdr[344:348] = b"n+1\x00"
    with open(path, "wb") as f:
        f.write(hdr)
        f.write(b"\x00" * 4)                                  # extension flag
        f.write(np.asfortranarray(data.astype(data.dtype.newbyteorder("<"))).tobytes(order="F"))


# ---------------------------------------------------------------------------
# Preprocessing chain
# ---------------------------------------------------------------------------

def reorient_axial(v: Volume) -> Volume:
    """Permute/flip voxel axes so the direction matrix is the signed
    permutation closest to identity (RAS). Lossless re-indexing."""
    R = v.direction
    # voxel axis c points mostly along world axis w with sign s
    world_axis = np.argmax(np.abs(R), axis=0)
    if len(set(world_axis)) != 3:
        raise ValueError("direction matrix has no dominant axis assignment")
    sign = np.sign(R[world_axis, np.arange(3)])
    order = [int(np.where(world_axis == a)[0][0]) for a in range(3)]
    data = np.transpose(v.data, axes=order)
    spacing = v.spacing[order]
    direction = R[:, order] * sign[order][np.newaxis, :]
    origin = v.origin.copy()
    flips = []
    for new_axis, old_axis in enumerate(order):
        if sign[old_axis] < 0:
            flips.append(new_axis)
            n = v.data.shape[old_axis]
            origin = origin + R[:, old_axis] * v.spacing[old_axis] * (n - 1)
    if flips:
        data = np.flip(data, axis=flips)
    return Volume(data=np.ascontiguousarray(data), spacing=spacing,
                  direction=direction, origin=origin)


def _catmull_rom_weights(t: np.ndarray) -> np.ndarray:
    """Weights for samples at offsets (-1, 0, 1, 2) from the base index."""
    t2 = t * t
    t3 = t2 * t
    w = np.empty(t.shape + (4,))
    w[..., 0] = 0.5 * (-t3 + 2 * t2 - t)
    w[..., 1] = 0.5 * (3 * t3 - 5 * t2 + 2)
    w[..., 2] = 0.5 * (-3 * t3 + 4 * t2 + t)
    w[..., 3] = 0.5 * (t3 - t2)
    return w


def _resample_axis(data: np.ndarray, axis: int, scale: float, new_n: int) -> np.ndarray:
    """Separable cubic (Catmull-Rom) resampling along one axis.

    Output sample j sits at input coordinate j*scale (voxel units);
    edges handled by clamping.
    """
    n = data.shape[axis]
    pos = np.arange(new_n, dtype=np.float64) * scale
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    w = _catmull_rom_weights(frac)                    # (new_n, 4)
    idx = np.clip(base[:, None] + np.arange(-1, 3)[None, :], 0, n - 1)
    moved = np.moveaxis(data, axis, 0).astype(np.float64)
    gathered = moved[idx]                             # (new_n, 4, ...)
    out = np.einsum("nf,nf...->n...", w, gathered)
    return np.moveaxis(out, 0, axis)


def resample_isotropic(v: Volume, target: float = 1.0) -> Volume:
    """Resample to an isotropic grid with tricubic (separable Catmull-Rom)
    interpolation, clipping to the input intensity range."""
    if np.any(v.spacing > 10.0):
        raise ValueError(f"degenerate spacing {v.spacing}")
    data = v.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    out = data
    for axis in range(3):
        scale = target / v.spacing[axis]
        new_n = max(1, int(round(v.data.shape[axis] * v.spacing[axis] / target)))
        if abs(v.spacing[axis] - target) < 1e-12 and new_n == v.data.shape[axis]:
            continue
        out = _resample_axis(out, axis, scale, new_n)
    out = np.clip(out, lo, hi)
    return Volume(data=out.astype(np.float32), spacing=np.full(3, target),
                  direction=v.direction.copy(), origin=v.origin.copy())


def center_of_mass(mask: Volume) -> np.ndarray:
    """Intensity-weighted centroid in world mm."""
    w = np.asarray(mask.data, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise EmptyMaskError("mask has no positive voxels")
    idx = [np.arange(n, dtype=np.float64) for n in w.shape]
    com_voxel = np.array([
        (w.sum(axis=tuple(a for a in range(3) if a != ax)) * idx[ax]).sum() / total
        for ax in range(3)
    ])
    return mask.voxel_to_world(com_voxel)


def pad_crop(v: Volume, center, shape=TARGET_SHAPE) -> Volume:
    """Pad/crop to the target shape, centered (to within half a voxel) on
    `center` (world mm). Integer-voxel alignment; no interpolation."""
    shape = tuple(int(s) for s in shape)
    c_vox = v.world_to_voxel(center)
    start = np.round(c_vox - (np.array(shape, dtype=np.float64) - 1) / 2.0).astype(np.int64)
    out = np.zeros(shape, dtype=v.data.dtype)
    src_lo = np.maximum(start, 0)
    src_hi = np.minimum(start + np.array(shape), v.data.shape)
    dst_lo = src_lo - start
    dst_hi = dst_lo + (src_hi - src_lo)
    if np.all(src_hi > src_lo):
        out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
            v.data[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
    origin = v.voxel_to_world(start)
    return Volume(data=out, spacing=v.spacing.copy(),
                  direction=v.direction.copy(), origin=origin)


def normalize_quantize(v: Volume) -> Volume:
    """Min-max normalize and quantize to uint16 (round half away from zero)."""
    data = np.asarray(v.data, dtype=np.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        raise ValueError("constant volume cannot be min-max normalized")
    u = np.floor(65535.0 * (data - lo) / (hi - lo) + 0.5).astype(np.uint16)
    return replace(v, data=u)


def extract_slices(v: Volume, spacing_mm: float = 4.0) -> list[np.ndarray]:
    """Triplanar 2D slices spaced by `spacing_mm`: axial, then coronal, then
    sagittal, ascending index."""
    step = max(1, int(round(spacing_mm / float(v.spacing[0]))))
    slices = []
    for k in range(0, v.data.shape[2], step):     # axial (constant z)
        slices.append(np.array(v.data[:, :, k]))
    for j in range(0, v.data.shape[1], step):     # coronal (constant y)
        slices.append(np.array(v.data[:, j, :]))
    for i in range(0, v.data.shape[0], step):     # sagittal (constant x)
        slices.append(np.array(v.data[i, :, :]))
    return slices


def brain_mask_fallback(v: Volume) -> Volume:
    """Otsu threshold + largest connected component, used when no mask
    accompanies a record."""
    from scipy import ndimage

    data = np.asarray(v.data, dtype=np.float64)
    thresh = _otsu_threshold(data)
    fg = data > thresh
    labels, nlab = ndimage.label(fg)
    if nlab == 0:
        raise EmptyMaskError("no foreground found by Otsu threshold")
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    mask = (labels == np.argmax(counts)).astype(np.uint16)
    return replace(v, data=mask)


def _otsu_threshold(data: np.ndarray, bins: int = 256) -> float:
    hist, edges = np.histogram(data.ravel(), bins=bins)
    mids = 0.5 * (edges[:-1] + edges[1:])
    w = hist.astype(np.float64)
    p = w / w.sum()
    omega = np.cumsum(p)
    mu = np.cumsum(p * mids)
    mu_t = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_t * omega - mu) ** 2 / (omega * (1.0 - omega))
    between[~np.isfinite(between)] = -1
    return float(mids[np.argmax(between)])

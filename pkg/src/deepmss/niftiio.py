"""Minimal NIfTI-1 reader/writer.

Supports single-file ``.nii`` / ``.nii.gz`` volumes with the common scalar
dtypes, diagonal sform affines (per-axis spacing + origin offset) and
scl_slope/scl_inter rescaling. Array layout follows the on-disk Fortran
order: ``data[i, j, k]`` indexes the (x, y, z) axes and
``physical = origin + index * spacing`` per axis.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import LoadError

HEADER_SIZE = 348
MAGIC = b"n+1\x00"

# NIfTI datatype code <-> numpy dtype
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        if "w" in mode:
            # mtime pinned to keep outputs byte-identical across runs
            return gzip.GzipFile(path, mode, mtime=0)
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float], tuple[float, float, float]]:
    """Read a NIfTI-1 volume.

    Returns (data, spacing, origin); data is 3D in (x, y, z) index order.
    Raises LoadError for missing files, unsupported encodings, or NaNs in
    the stored data.
    """
    path = Path(path)
    if not path.exists():
        raise LoadError(f"volume file not found: {path}")
    try:
        with _open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise LoadError(f"{path}: truncated NIfTI header ({len(raw)} bytes)")

    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        endian = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise LoadError(f"{path}: not a NIfTI-1 file (sizeof_hdr={sizeof_hdr})")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise LoadError(f"{path}: bad NIfTI magic {magic!r}")

    dim = struct.unpack_from(endian + "8h", raw, 40)
    ndim = dim[0]
    if ndim < 3:
        raise LoadError(f"{path}: expected a 3D volume, got dim[0]={ndim}")
    shape = tuple(int(d) for d in dim[1:4])
    if ndim > 3 and any(d > 1 for d in dim[4 : 1 + ndim]):
        raise LoadError(f"{path}: volumes with a non-trivial 4th dimension are unsupported")
    if any(d < 1 for d in shape):
        raise LoadError(f"{path}: degenerate dimensions {shape}")

    (datatype, bitpix) = struct.unpack_from(endian + "2h", raw, 70)
    if datatype not in _DTYPES:
        raise LoadError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(endian)

    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", raw, 108)
    (scl_slope, scl_inter) = struct.unpack_from(endian + "2f", raw, 112)
    (sform_code,) = struct.unpack_from(endian + "h", raw, 254)
    srow = np.array(struct.unpack_from(endian + "12f", raw, 280), dtype=np.float64).reshape(3, 4)

    if sform_code > 0:
        # spacing = column norms of the 3x3 part; origin = translation column
        spacing = tuple(float(np.linalg.norm(srow[:, a])) for a in range(3))
        origin = tuple(float(srow[a, 3]) for a in range(3))
    else:
        spacing = tuple(float(abs(p)) for p in pixdim[1:4])
        origin = (0.0, 0.0, 0.0)
    if any(s <= 0 for s in spacing):
        raise LoadError(f"{path}: non-positive voxel spacing {spacing}")

    offset = int(vox_offset) if vox_offset else HEADER_SIZE + 4
    count = int(np.prod(shape))
    nbytes = count * bitpix // 8
    if len(raw) < offset + nbytes:
        raise LoadError(f"{path}: truncated data section")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = flat.reshape(shape, order="F")

    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float64) * slope + scl_inter
    else:
        data = np.asarray(data)
    if np.issubdtype(data.dtype, np.floating) and np.isnan(data).any():
        raise LoadError(f"{path}: stored volume contains NaN")
    return np.ascontiguousarray(data), spacing, origin


def write_nifti(path, data: np.ndarray, spacing, origin=(0.0, 0.0, 0.0)) -> None:
    """Write a 3D array as a single-file NIfTI-1 volume (.nii or .nii.gz)."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected 3D data, got shape {data.shape}")
    dtype = np.dtype(data.dtype)
    if dtype not in _CODES:
        # store anything exotic as float32
        data = data.astype(np.float32)
        dtype = np.dtype(np.float32)
    code = _CODES[dtype]
    bitpix = dtype.itemsize * 8
    spacing = tuple(float(s) for s in spacing)
    origin = tuple(float(o) for o in origin)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, data.shape[0], data.shape[1], data.shape[2], 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(HEADER_SIZE + 4))  # vox_offset
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code=0, sform_code=1
    srow = np.zeros((3, 4), dtype=np.float32)
    for a in range(3):
        srow[a, a] = spacing[a]
        srow[a, 3] = origin[a]
    struct.pack_into("<12f", hdr, 280, *srow.ravel().tolist())
    hdr[344:348] = MAGIC

    payload = bytes(hdr) + b"\x00\x00\x00\x00" + data.tobytes(order="F")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open(path, "wb") as f:
        f.write(payload)

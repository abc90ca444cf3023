"""Volume container plus NIfTI-1 / raw readers and writers.

Arrays are held as ``data[x, y, z]``. On disk the linear order is x fastest,
then y, then z (Fortran order of the in-memory array), for both formats.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

NIFTI_HEADER_SIZE = 348
NIFTI_MIN_VOX_OFFSET = 352

# NIfTI datatype code -> little-endian numpy dtype
NIFTI_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
}
NIFTI_CODES = {dt: code for code, dt in NIFTI_DTYPES.items()}

RAW_DTYPES = {
    "uint8": np.dtype("<u1"),
    "int16": np.dtype("<i2"),
    "uint16": np.dtype("<u2"),
    "int32": np.dtype("<i4"),
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
}

KINDS = ("intensity", "labels")


class VolumeFormatError(ValueError):
    """A volume file could not be parsed. ``offset`` is the byte position at fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    kind: str = "intensity"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DimensionError(f"volume data must be a non-empty 3D grid, got shape {data.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing!r}")
        if self.kind == "labels" and not np.issubdtype(data.dtype, np.integer):
            raise ValueError("label volumes need an integer dtype")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape)

    def replace(self, data, kind=None, **meta):
        """New volume sharing spacing and provenance with ``self``."""
        return Volume(data, self.spacing, kind or self.kind, {**self.meta, **meta})


def label_dtype(max_label):
    """Smallest integer dtype holding labels up to ``max_label``."""
    for dt in (np.uint8, np.int16, np.int32):
        if max_label <= np.iinfo(dt).max:
            return np.dtype(dt)
    raise ValueError(f"label value {max_label} does not fit in int32")


def _as_kind(arr, kind):
    if kind == "intensity":
        return arr.astype(np.float32)
    if arr.size and (np.any(arr < 0) or np.any(arr != np.round(arr))):
        raise VolumeFormatError("label volume holds negative or non-integer values")
    top = int(arr.max()) if arr.size else 0
    return arr.astype(label_dtype(top))


def _infer_format(path):
    return "nifti1" if str(path).endswith(".nii") else "raw"


def load_volume(path, format=None, kind="intensity"):
    """Read a volume from ``path``.

    ``format`` is ``"nifti1"`` or ``"raw"`` (guessed from the suffix when omitted).
    Intensities come back as float32; labels as the smallest integer type that
    holds the largest label.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    format = format or _infer_format(path)
    if format == "nifti1":
        return _load_nifti(path, kind)
    if format == "raw":
        return _load_raw(path, kind)
    raise ValueError(f"unknown volume format {format!r}")


def write_volume(v, path, format=None):
    path = Path(path)
    format = format or _infer_format(path)
    if format == "nifti1":
        _write_nifti(v, path)
    elif format == "raw":
        _write_raw(v, path)
    else:
        raise ValueError(f"unknown volume format {format!r}")


# -- raw ---------------------------------------------------------------------

def raw_sidecar(path):
    return Path(str(path) + ".json")


def _load_raw(path, kind):
    side = raw_sidecar(path)
    if not side.exists():
        raise FileNotFoundError(side)
    try:
        meta = json.loads(side.read_text())
        dims = tuple(int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta.get("spacing", (1, 1, 1)))
        dtype = RAW_DTYPES[meta["dtype"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise VolumeFormatError(f"bad raw sidecar {side}: {exc}") from exc
    kind = meta.get("kind", kind)
    buf = path.read_bytes()
    need = int(np.prod(dims)) * dtype.itemsize
    if len(buf) < need:
        raise VolumeFormatError(f"truncated raw data: need {need} bytes, found {len(buf)}", len(buf))
    arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims))).reshape(dims, order="F")
    return Volume(_as_kind(arr, kind), spacing, kind, {"source": str(path), "format": "raw"})


def _write_raw(v, path):
    name = {dt: n for n, dt in RAW_DTYPES.items()}.get(v.data.dtype.newbyteorder("<"))
    if name is None:
        raise ValueError(f"raw format cannot store dtype {v.data.dtype}")
    path.write_bytes(np.asarray(v.data, dtype=RAW_DTYPES[name]).tobytes(order="F"))
    meta = {"dims": list(v.dims), "spacing": list(v.spacing), "dtype": name, "kind": v.kind}
    raw_sidecar(path).write_text(json.dumps(meta, indent=1) + "\n")


# -- NIfTI-1 -----------------------------------------------------------------

def _load_nifti(path, kind):
    buf = path.read_bytes()
    if len(buf) < NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"file too short for a NIfTI-1 header ({len(buf)} bytes)", len(buf))
    (sizeof_hdr,) = struct.unpack_from("<i", buf, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        if struct.unpack_from(">i", buf, 0)[0] == NIFTI_HEADER_SIZE:
            raise VolumeFormatError("big-endian NIfTI-1 is not supported", 0)
        raise VolumeFormatError(f"sizeof_hdr is {sizeof_hdr}, expected 348", 0)
    magic = buf[344:348]
    if magic != b"n+1\x00":
        raise VolumeFormatError(f"bad magic {magic!r}; only single-file n+1 is supported", 344)
    dim = struct.unpack_from("<8h", buf, 40)
    if not 1 <= dim[0] <= 7:
        raise VolumeFormatError(f"dim[0] = {dim[0]} out of range", 40)
    if dim[0] > 3 and any(d > 1 for d in dim[4:dim[0] + 1]):
        raise VolumeFormatError("only 3D volumes are supported", 40)
    dims = tuple(d if i < dim[0] else 1 for i, d in enumerate(dim[1:4]))
    if min(dims) < 1:
        raise VolumeFormatError(f"non-positive dimension in {dims}", 42)
    (datatype,) = struct.unpack_from("<h", buf, 70)
    if datatype not in NIFTI_DTYPES:
        raise VolumeFormatError(f"unsupported datatype code {datatype}", 70)
    dtype = NIFTI_DTYPES[datatype]
    pixdim = struct.unpack_from("<8f", buf, 76)
    spacing = tuple(abs(p) if p else 1.0 for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from("<f", buf, 108)
    offset = int(vox_offset)
    if offset < NIFTI_MIN_VOX_OFFSET:
        raise VolumeFormatError(f"vox_offset {vox_offset} below 352", 108)
    slope, inter = struct.unpack_from("<2f", buf, 112)
    count = int(np.prod(dims))
    need = offset + count * dtype.itemsize
    if len(buf) < need:
        raise VolumeFormatError(f"truncated data section: need {need} bytes, found {len(buf)}", len(buf))
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims, order="F")
    if kind == "intensity" and (slope not in (0.0, 1.0) or inter != 0.0):
        arr = arr * np.float32(slope or 1.0) + np.float32(inter)
    meta = {"source": str(path), "format": "nifti1", "nifti_header": bytes(buf[:NIFTI_HEADER_SIZE])}
    return Volume(_as_kind(arr, kind), spacing, kind, meta)


def _blank_header():
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<b", hdr, 38, ord("r"))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units = mm
    hdr[344:348] = b"n+1\x00"
    return hdr


def _write_nifti(v, path):
    arr = v.data
    if arr.dtype.kind == "f":
        arr = arr.astype("<f4")
    else:
        arr = arr.astype(label_dtype(int(arr.max()) if arr.size else 0).newbyteorder("<"))
    code = NIFTI_CODES[arr.dtype]
    hdr = bytearray(v.meta.get("nifti_header") or _blank_header())
    struct.pack_into("<8h", hdr, 40, 3, *v.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, arr.dtype.itemsize * 8)
    (qfac,) = struct.unpack_from("<f", hdr, 76)
    struct.pack_into("<4f", hdr, 76, qfac if qfac in (-1.0, 1.0) else 1.0, *v.spacing)
    struct.pack_into("<f", hdr, 108, float(NIFTI_MIN_VOX_OFFSET))
    # stored values are already in physical units
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00\x00\x00\x00")
        fh.write(arr.tobytes(order="F"))
    os.replace(tmp, path)


# -- preprocessing -----------------------------------------------------------

def minmax_normalize(v):
    """Affinely map intensities to [0, 1]; a constant volume maps to zeros."""
    if v.kind != "intensity":
        raise ValueError("min-max normalization applies to intensity volumes only")
    data = np.asarray(v.data)
    dtype = data.dtype if data.dtype.kind == "f" else np.float32
    lo, hi = data.min(), data.max()
    if hi == lo:
        log.warning("constant volume (value %g); normalizing to zeros", lo)
        return v.replace(np.zeros(v.dims, dtype=dtype))
    out = (data.astype(dtype) - lo) / (hi - lo)
    # rounding may push the top value to 1 + ulp
    np.clip(out, 0.0, 1.0, out=out)
    return v.replace(out.astype(dtype, copy=False))


def pad_to_cube(v, side):
    """Center ``v`` inside a zero-filled ``side``-cube."""
    if any(d > side for d in v.dims):
        raise DimensionError(f"volume dims {v.dims} exceed target side {side}")
    if v.dims == (side, side, side):
        return v
    out = np.zeros((side,) * 3, dtype=v.data.dtype)
    lo = [(side - d) // 2 for d in v.dims]
    out[tuple(slice(o, o + d) for o, d in zip(lo, v.dims))] = v.data
    return v.replace(out, pad_offset=tuple(lo))


def preprocess(v, side=256):
    """Normalize then pad, the order used for every network input."""
    return pad_to_cube(minmax_normalize(v), side)

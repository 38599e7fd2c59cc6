"""Single-file NIfTI-1 (.nii / .nii.gz) reading and writing.

Only the three payload types the toolkit produces are supported:
uint8 masks, int16 label images and float32 images / probability
volumes. Compression is detected from the gzip magic bytes; on write,
a ``.gz`` suffix selects compression.
"""

from __future__ import annotations

import gzip
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .volume import VoxelGrid

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
GZIP_MAGIC = b"\x1f\x8b"
MAX_DIM = 32767

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    16: np.dtype(np.float32),
}
DATATYPE_CODES = {dt: code for code, dt in DATATYPES.items()}

_FIELDS = [
    ("i", "sizeof_hdr"), ("10s", "data_type"), ("18s", "db_name"), ("i", "extents"),
    ("h", "session_error"), ("b", "regular"), ("b", "dim_info"), ("8h", "dim"),
    ("f", "intent_p1"), ("f", "intent_p2"), ("f", "intent_p3"), ("h", "intent_code"),
    ("h", "datatype"), ("h", "bitpix"), ("h", "slice_start"), ("8f", "pixdim"),
    ("f", "vox_offset"), ("f", "scl_slope"), ("f", "scl_inter"), ("h", "slice_end"),
    ("b", "slice_code"), ("b", "xyzt_units"), ("f", "cal_max"), ("f", "cal_min"),
    ("f", "slice_duration"), ("f", "toffset"), ("i", "glmax"), ("i", "glmin"),
    ("80s", "descrip"), ("24s", "aux_file"), ("h", "qform_code"), ("h", "sform_code"),
    ("f", "quatern_b"), ("f", "quatern_c"), ("f", "quatern_d"),
    ("f", "qoffset_x"), ("f", "qoffset_y"), ("f", "qoffset_z"),
    ("4f", "srow_x"), ("4f", "srow_y"), ("4f", "srow_z"),
    ("16s", "intent_name"), ("4s", "magic"),
]
_FORMAT = "".join(f for f, _ in _FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE

# header fields copied from a reference image so outputs overlay it
SPATIAL_FIELDS = (
    "qform_code", "sform_code", "quatern_b", "quatern_c", "quatern_d",
    "qoffset_x", "qoffset_y", "qoffset_z", "srow_x", "srow_y", "srow_z",
    "xyzt_units", "dim_info",
)


class NiftiError(Exception):
    """Base class for volume-file errors."""


class NotNiftiError(NiftiError):
    """Bad header size or magic string."""


class UnsupportedDatatypeError(NiftiError):
    """Payload type other than uint8, int16 or float32."""


class DimensionOverflowError(NiftiError):
    """Dimension count or extents outside what the toolkit handles."""


class TruncatedPayloadError(NiftiError):
    """The file ends before the header or the voxel data is complete."""


def _unpack(raw, endian):
    values = struct.unpack(endian + _FORMAT, raw[:HEADER_SIZE])
    header, pos = {}, 0
    for fmt, name in _FIELDS:
        count = int(fmt[:-1]) if len(fmt) > 1 and fmt[-1] != "s" else 1
        header[name] = values[pos] if count == 1 else tuple(values[pos:pos + count])
        pos += count
    return header


def _pack(header):
    values = []
    for fmt, name in _FIELDS:
        v = header[name]
        values.extend(v if isinstance(v, (tuple, list)) else [v])
    return struct.pack("<" + _FORMAT, *values)


def _qform_affine(h):
    b, c, d = h["quatern_b"], h["quatern_c"], h["quatern_d"]
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if h["pixdim"][0] < 0 else 1.0
    zooms = np.array([h["pixdim"][1], h["pixdim"][2], h["pixdim"][3] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = rot * zooms
    affine[:3, 3] = (h["qoffset_x"], h["qoffset_y"], h["qoffset_z"])
    return affine


def header_affine(h):
    if h["sform_code"] > 0:
        return np.array([h["srow_x"], h["srow_y"], h["srow_z"], (0, 0, 0, 1)], dtype=np.float64)
    if h["qform_code"] > 0:
        return _qform_affine(h)
    return np.diag([*(abs(p) or 1.0 for p in h["pixdim"][1:4]), 1.0])


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (EOFError, zlib.error) as exc:
            raise TruncatedPayloadError(f"{path}: truncated or corrupt gzip stream ({exc})") from None
        except gzip.BadGzipFile as exc:
            raise NotNiftiError(f"{path}: bad gzip stream ({exc})") from None
    return raw


def parse_header(raw, path="<bytes>"):
    """Decode the 348-byte header; returns ``(header, endian)``."""
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayloadError(f"{path}: file ends inside the header ({len(raw)} bytes)")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise NotNiftiError(f"{path}: header size field is not {HEADER_SIZE}")
    header = _unpack(raw, endian)
    if header["magic"] == MAGIC_PAIR:
        raise NotNiftiError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")
    if header["magic"] != MAGIC_SINGLE:
        raise NotNiftiError(f"{path}: bad magic {header['magic']!r}")
    return header, endian


def _check_dims(dim, path):
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise DimensionOverflowError(f"{path}: invalid dimension count {ndim}")
    shape = list(dim[1:ndim + 1])
    if any(n < 1 for n in shape):
        raise DimensionOverflowError(f"{path}: non-positive extent in {tuple(shape)}")
    # trailing singleton axes beyond the 4th are harmless
    while len(shape) > 4 and shape[-1] == 1:
        shape.pop()
    if len(shape) > 4:
        raise DimensionOverflowError(f"{path}: {len(shape)}D volumes are not supported")
    while len(shape) < 3:
        shape.append(1)
    return tuple(shape)


def read_volume(path):
    """Read a NIfTI-1 file into a ``VoxelGrid``.

    A 4D file is returned with the class channel as the last axis.
    Raises a ``NiftiError`` subclass naming the problem; nothing is
    returned for a damaged file.
    """
    raw = _read_bytes(path)
    header, endian = parse_header(raw, path)
    shape = _check_dims(header["dim"], path)

    code = header["datatype"]
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported datatype code {code}")
    dtype = DATATYPES[code].newbyteorder(endian)
    if header["bitpix"] != dtype.itemsize * 8:
        raise NotNiftiError(f"{path}: bitpix {header['bitpix']} does not match datatype {code}")

    offset = int(header["vox_offset"])
    if offset < HEADER_SIZE:
        raise NotNiftiError(f"{path}: vox_offset {header['vox_offset']} inside the header")
    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise TruncatedPayloadError(
            f"{path}: truncated payload, expected {nbytes} bytes after offset {offset}, "
            f"found {max(0, len(raw) - offset)}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.astype(dtype.newbyteorder("="), copy=True).reshape(shape, order="F")

    slope, inter = header["scl_slope"], header["scl_inter"]
    if np.isfinite(slope) and slope != 0 and (slope != 1 or inter != 0):
        data = (data * np.float32(slope) + np.float32(inter)).astype(np.float32)

    spacing = tuple(abs(p) or 1.0 for p in header["pixdim"][1:4])
    return VoxelGrid(data, spacing=spacing, affine=header_affine(header), header=header)


def choose_dtype(data):
    """On-disk type for an array: bool/uint8 -> uint8, int16, floats -> float32."""
    data = np.asarray(data)
    if data.dtype == bool or data.dtype == np.uint8:
        return np.dtype(np.uint8)
    if data.dtype == np.int16:
        return np.dtype(np.int16)
    if data.dtype.kind == "f":
        return np.dtype(np.float32)
    if data.dtype.kind in "iu":
        lo, hi = (int(data.min()), int(data.max())) if data.size else (0, 0)
        if 0 <= lo and hi <= 255:
            return np.dtype(np.uint8)
        if -32768 <= lo and hi <= 32767:
            return np.dtype(np.int16)
    raise UnsupportedDatatypeError(f"cannot store {data.dtype} data as uint8, int16 or float32")


def encode_volume(grid, like=None, dtype=None):
    """Serialise ``grid`` to uncompressed NIfTI-1 bytes."""
    data = grid.data
    dtype = np.dtype(dtype) if dtype is not None else choose_dtype(data)
    if dtype not in DATATYPE_CODES:
        raise UnsupportedDatatypeError(f"unsupported datatype {dtype}")
    if any(n > MAX_DIM for n in data.shape):
        raise DimensionOverflowError(f"extent {data.shape} exceeds {MAX_DIM}")

    dim = [data.ndim, *data.shape] + [1] * (7 - data.ndim)
    affine = np.asarray(grid.affine, dtype=np.float64)
    header = {
        "sizeof_hdr": HEADER_SIZE, "data_type": b"", "db_name": b"", "extents": 0,
        "session_error": 0, "regular": ord("r"), "dim_info": 0, "dim": tuple(dim),
        "intent_p1": 0.0, "intent_p2": 0.0, "intent_p3": 0.0, "intent_code": 0,
        "datatype": DATATYPE_CODES[dtype], "bitpix": dtype.itemsize * 8, "slice_start": 0,
        "pixdim": (1.0, *grid.spacing, 1.0, 1.0, 1.0, 1.0), "vox_offset": float(VOX_OFFSET),
        "scl_slope": 1.0, "scl_inter": 0.0, "slice_end": 0, "slice_code": 0,
        "xyzt_units": 2 | 8, "cal_max": 0.0, "cal_min": 0.0, "slice_duration": 0.0,
        "toffset": 0.0, "glmax": 0, "glmin": 0, "descrip": b"lesionlab", "aux_file": b"",
        "qform_code": 0, "sform_code": 2,
        "quatern_b": 0.0, "quatern_c": 0.0, "quatern_d": 0.0,
        "qoffset_x": 0.0, "qoffset_y": 0.0, "qoffset_z": 0.0,
        "srow_x": tuple(affine[0]), "srow_y": tuple(affine[1]), "srow_z": tuple(affine[2]),
        "intent_name": b"", "magic": MAGIC_SINGLE,
    }
    if like is not None and like.header:
        for name in SPATIAL_FIELDS:
            header[name] = like.header[name]
        pixdim = list(header["pixdim"])
        pixdim[0] = like.header["pixdim"][0] or 1.0
        header["pixdim"] = tuple(pixdim)
    payload = np.ascontiguousarray(data.astype(dtype.newbyteorder("<")).ravel(order="F"))
    return _pack(header) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload.tobytes()


def atomic_write(path, data):
    """Write bytes via a temporary file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(grid, path, like=None, dtype=None):
    """Write ``grid`` (a ``VoxelGrid`` or array) to ``path`` atomically.

    ``like`` is a grid read from disk whose orientation fields are copied
    so the output overlays it in viewers. A ``.gz`` suffix compresses.
    """
    if not isinstance(grid, VoxelGrid):
        grid = VoxelGrid(np.asarray(grid))
    raw = encode_volume(grid, like=like, dtype=dtype)
    if str(path).endswith(".gz"):
        raw = gzip.compress(raw, compresslevel=6, mtime=0)
    atomic_write(path, raw)

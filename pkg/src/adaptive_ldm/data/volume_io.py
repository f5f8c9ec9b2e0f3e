"""Volume file formats: the RVOL raw container and a minimal NIfTI-1 reader.

RVOL layout (all little-endian)::

    offset 0   magic   b"RVOL"
    offset 4   u16     version (1)
    offset 6   u8      dtype code (0 = float32)
    offset 7   u8      rank
    offset 8   u32 * rank  extents
    ...        float32 payload, row-major
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from ..metrics import minmax_normalize

RVOL_MAGIC = b"RVOL"
RVOL_VERSION = 1
MAX_ELEMENTS = 2**31 - 1


class VolumeFormatError(ValueError):
    """Base class for malformed volume files."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class ExtentOverflowError(VolumeFormatError):
    pass


class UnsupportedDatatypeError(VolumeFormatError):
    pass


class BadDimensionError(VolumeFormatError):
    pass


def encode_raw(volume: np.ndarray) -> bytes:
    v = np.ascontiguousarray(volume, dtype="<f4")
    if v.ndim > 255:
        raise ValueError("rank exceeds 255")
    head = RVOL_MAGIC + struct.pack("<HBB", RVOL_VERSION, 0, v.ndim)
    head += struct.pack(f"<{v.ndim}I", *v.shape)
    return head + v.tobytes()


def decode_raw(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8:
        raise TruncatedPayloadError(f"{source}: header needs 8 bytes, file has {len(buf)}")
    if buf[:4] != RVOL_MAGIC:
        raise BadMagicError(f"{source}: bad magic {buf[:4]!r} at offset 0 (expected {RVOL_MAGIC!r})")
    version, dtype_code, rank = struct.unpack_from("<HBB", buf, 4)
    if version != RVOL_VERSION:
        raise VolumeFormatError(f"{source}: unsupported version {version} at offset 4")
    if dtype_code != 0:
        raise UnsupportedDatatypeError(f"{source}: unsupported dtype code {dtype_code} at offset 6")
    ext_end = 8 + 4 * rank
    if len(buf) < ext_end:
        raise TruncatedPayloadError(f"{source}: extents need {ext_end} bytes, file has {len(buf)}")
    extents = struct.unpack_from(f"<{rank}I", buf, 8)
    count = 1
    for e in extents:
        count *= e
    if count > MAX_ELEMENTS:
        raise ExtentOverflowError(f"{source}: extents {extents} declare {count} elements (max {MAX_ELEMENTS})")
    have = (len(buf) - ext_end) // 4
    if have < count:
        raise TruncatedPayloadError(f"{source}: extents {extents} need {count} values, payload has {have}")
    if len(buf) != ext_end + 4 * count:
        raise VolumeFormatError(f"{source}: {len(buf) - ext_end - 4 * count} trailing bytes after payload")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=ext_end).reshape(extents).astype(np.float32)


def save_raw(volume: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_raw(volume))


def load_raw(path) -> np.ndarray:
    return decode_raw(Path(path).read_bytes(), str(path))


# -- NIfTI-1 -------------------------------------------------------------------

NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("i2"), 16: np.dtype("f4")}


def _read_maybe_gzip(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_nifti_header(buf: bytes) -> dict:
    if len(buf) < 348:
        raise TruncatedPayloadError(f"NIfTI header needs 348 bytes, got {len(buf)}")
    if struct.unpack_from("<i", buf, 0)[0] == 348:
        endian = "<"
    elif struct.unpack_from(">i", buf, 0)[0] == 348:
        endian = ">"
    else:
        raise VolumeFormatError("NIfTI sizeof_hdr is not 348 in either byte order")
    magic = buf[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagicError(f"NIfTI bad magic {magic!r} at offset 344")
    dim = struct.unpack_from(f"{endian}8h", buf, 40)
    datatype, bitpix = struct.unpack_from(f"{endian}hh", buf, 70)
    pixdim = struct.unpack_from(f"{endian}8f", buf, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(f"{endian}3f", buf, 108)
    return {
        "endian": endian,
        "magic": magic.rstrip(b"\x00").decode(),
        "dim": dim,
        "datatype": datatype,
        "bitpix": bitpix,
        "pixdim": pixdim,
        "vox_offset": vox_offset,
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
    }


def load_nifti(path) -> tuple[np.ndarray, dict]:
    """Read a NIfTI-1 volume, apply scaling and min-max normalize to [0, 1].

    Returns the volume indexed ``[i, j, k]`` over header ``dim[1..3]`` and the
    parsed header fields.
    """
    path = Path(path)
    buf = _read_maybe_gzip(path)
    hdr = parse_nifti_header(buf)
    dim = hdr["dim"]
    if dim[0] not in (3, 4):
        raise BadDimensionError(f"{path}: dim[0] = {dim[0]}, expected 3 or 4")
    if hdr["datatype"] not in NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported NIfTI datatype code {hdr['datatype']}")
    shape = tuple(int(d) for d in dim[1:4])
    if min(shape) < 1:
        raise BadDimensionError(f"{path}: non-positive spatial dims {shape}")
    dtype = NIFTI_DTYPES[hdr["datatype"]].newbyteorder(hdr["endian"])
    if hdr["magic"] == "n+1":
        payload, offset = buf, int(hdr["vox_offset"])
    else:
        img = path.with_suffix(".img") if path.suffix != ".gz" else Path(str(path)[:-7] + ".img")
        payload, offset = _read_maybe_gzip(img), 0
    count = shape[0] * shape[1] * shape[2]
    if len(payload) < offset + count * dtype.itemsize:
        raise TruncatedPayloadError(
            f"{path}: payload needs {count * dtype.itemsize} bytes at offset {offset}, have {len(payload) - offset}"
        )
    # NIfTI stores the first index fastest
    vol = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(shape, order="F")
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    if hdr["scl_slope"] != 0:
        vol = vol * hdr["scl_slope"] + hdr["scl_inter"]
    return minmax_normalize(vol).astype(np.float32), hdr


def write_nifti(path, volume: np.ndarray, datatype: int = 16, scl_slope: float = 0.0, scl_inter: float = 0.0,
                magic: bytes = b"n+1\x00") -> None:
    """Write a single-file NIfTI-1 volume (used to build fixtures and exports)."""
    vol = np.asarray(volume)
    dtype = NIFTI_DTYPES[datatype].newbyteorder("<")
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *vol.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, 352.0, scl_slope, scl_inter)
    hdr[344:348] = magic
    body = np.asarray(vol, dtype=dtype).tobytes(order="F")
    Path(path).write_bytes(bytes(hdr) + b"\x00" * 4 + body)

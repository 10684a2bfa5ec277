"""Portable binary tensor files and PGM map export.

Layout (all integers and floats little-endian):

    bytes 0..3    magic "OMNI"
    bytes 4..7    format version, u32: 1 = float32 payload, 2 = float64
    bytes 8..11   rank, u32
    then          rank extents, u64 each
    then          row-major payload, itemsize * product(extents) bytes

Rank 0 denotes a scalar (zero extents, one payload element).  Readers never
crash on malformed bytes; every defect raises :class:`FormatError` with the
offending byte offset.
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"OMNI"
_MAX_RANK = 64
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_VERSION_FOR = {"f32": 1, "f64": 2}


def write_tensor(path, array, precision="f32"):
    """Serialize ``array`` at the given payload precision ("f32" or "f64")."""
    if precision not in _VERSION_FOR:
        raise FormatError(f"unknown payload precision {precision!r}")
    version = _VERSION_FOR[precision]
    arr = np.ascontiguousarray(array, dtype=np.float64)
    header = MAGIC + struct.pack("<II", version, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = arr.astype(_DTYPES[version]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(extents)
        fh.write(payload)


def read_tensor(path):
    """Deserialize a tensor file; always returns a float64 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_tensor(blob)


def parse_tensor(blob):
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"bad magic; expected {MAGIC!r}", offset=0)
    if len(blob) < 8:
        raise FormatError("truncated before version field", offset=4)
    (version,) = struct.unpack_from("<I", blob, 4)
    if version not in _DTYPES:
        raise FormatError(f"unsupported format version {version}", offset=4)
    if len(blob) < 12:
        raise FormatError("truncated before rank field", offset=8)
    (rank,) = struct.unpack_from("<I", blob, 8)
    if rank > _MAX_RANK:
        raise FormatError(f"rank {rank} exceeds limit {_MAX_RANK}", offset=8)
    extents_end = 12 + 8 * rank
    if len(blob) < extents_end:
        raise FormatError(
            f"truncated extents: need {extents_end} header bytes, file has {len(blob)}",
            offset=12)
    extents = struct.unpack_from(f"<{rank}Q", blob, 12) if rank else ()
    count = 1
    for e in extents:
        count *= int(e)
        if count > (1 << 40):
            raise FormatError(f"extents {extents} imply an implausible element count", offset=12)
    dtype = _DTYPES[version]
    expected = count * dtype.itemsize
    actual = len(blob) - extents_end
    if actual != expected:
        raise FormatError(
            f"payload length mismatch: expected {expected} bytes, found {actual}",
            offset=extents_end)
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=extents_end)
    return data.astype(np.float64).reshape(extents)


def write_pgm(path, array):
    """8-bit binary PGM of a 2-D map, min-max normalized.

    The comment line records the original value range so the scaling is
    recoverable.
    """
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"PGM export needs a 2-D map, got shape {arr.shape}")
    lo = float(arr.min())
    hi = float(arr.max())
    span = hi - lo
    scaled = np.zeros_like(arr) if span == 0.0 else (arr - lo) / span
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    h, w = arr.shape
    header = f"P5\n# min={lo!r} max={hi!r}\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pixels.tobytes())

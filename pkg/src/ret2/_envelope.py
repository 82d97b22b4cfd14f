"""Shared binary envelope for feature, checkpoint, embedding and shard files.

Layout::

    8 bytes   magic (ASCII)
    u32 LE    version
    u32 LE    header length in bytes
    ...       UTF-8 JSON header
    ...       raw little-endian float32 tensors, in the order the header lists them

Values are widened to float64 when read.
"""

import io
import json
import struct

import numpy as np

from .errors import DataError, FormatError

VERSION = 1
_PREFIX = struct.Struct("<8sII")
_F32 = np.dtype("<f4")


def encode(magic, header, arrays):
    """Serialise ``header`` (dict) and ``arrays`` to bytes."""
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    body = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_PREFIX.pack(magic, VERSION, len(body)))
    buf.write(body)
    for arr in arrays:
        with np.errstate(over="ignore"):
            f32 = np.ascontiguousarray(arr, dtype=_F32)
        if not np.isfinite(f32).all():
            raise DataError("refusing to write non-finite or float32-overflowing values")
        buf.write(f32.tobytes())
    return buf.getvalue()


def decode(magic, blob):
    """Split ``blob`` into (header, payload reader)."""
    if len(blob) < _PREFIX.size:
        raise FormatError("file truncated before header")
    got_magic, version, hlen = _PREFIX.unpack_from(blob)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}", field="magic")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", field="version")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise FormatError("file truncated inside JSON header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable JSON header: {exc}", field="header") from None
    return header, PayloadReader(blob, start + hlen)


class PayloadReader:
    def __init__(self, blob, offset):
        self._blob = blob
        self._pos = offset

    def take(self, shape, field="payload"):
        shape = tuple(int(s) for s in shape)
        n = int(np.prod(shape)) if shape else 1
        end = self._pos + 4 * n
        if end > len(self._blob):
            raise FormatError(f"payload truncated while reading {field}", field=field)
        arr = np.frombuffer(self._blob, dtype=_F32, count=n, offset=self._pos)
        self._pos = end
        return arr.astype(np.float64).reshape(shape)

    def finish(self):
        if self._pos != len(self._blob):
            raise FormatError(f"{len(self._blob) - self._pos} trailing bytes after payload")


def write_file(path, magic, header, arrays):
    with open(path, "wb") as fh:
        fh.write(encode(magic, header, arrays))


def read_file(path, magic):
    with open(path, "rb") as fh:
        return decode(magic, fh.read())


def to_f32_grid(arr):
    """Round to the nearest float32 value but keep float64 storage.

    Values beyond the float32 range become inf; callers check finiteness.
    """
    with np.errstate(over="ignore"):
        return np.asarray(arr, dtype=np.float64).astype(np.float32).astype(np.float64)

"""Binary weight container.

Layout (all integers little-endian):

    magic   4 bytes  b"BITK"
    version u32      currently 1
    repeated until end of file:
        name_len u32
        name     UTF-8, name_len bytes
        rank     u32
        extents  u64 * rank
        dtype    u8   (0 = float32, 1 = float64)
        data     row-major raw values

The same container stores model weights and, in a sidecar file, optimizer
state; both are plain name -> array dicts.  The reader rejects unknown magic,
unknown versions, unknown dtype tags, and truncated files.
"""

import struct

import numpy as np

from blurinterp.errors import CheckpointFormatError

MAGIC = b"BITK"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


def save(path, params):
    """Write a name -> ndarray mapping.  Iteration order is preserved."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in params.items():
            arr = np.asarray(arr, order="C")   # keeps 0-d rank, unlike ascontiguousarray
            tag = _DTYPE_TAGS.get(arr.dtype)
            if tag is None:
                raise CheckpointFormatError(
                    f"parameter {name!r} has unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(struct.pack("<B", tag))
            fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(
            f"truncated file while reading {what} (wanted {n} bytes, "
            f"got {len(buf)})")
    return buf


def load(path):
    """Read a container back into an ordered name -> ndarray dict."""
    params = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointFormatError(
                f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointFormatError(
                f"unknown container version {version} (reader supports "
                f"{VERSION})")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointFormatError("truncated file in name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(
                f"<{rank}Q", _read_exact(fh, 8 * rank, "extents"))
            (tag,) = struct.unpack("<B", _read_exact(fh, 1, "dtype tag"))
            dtype = _TAG_DTYPES.get(tag)
            if dtype is None:
                raise CheckpointFormatError(f"unknown dtype tag {tag}")
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, count * dtype.itemsize, f"data of {name!r}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
            if name in params:
                raise CheckpointFormatError(f"duplicate parameter {name!r}")
            params[name] = arr
    return params


def filter_params(params, exclude_prefixes=()):
    """Copy of ``params`` without names starting with any excluded prefix."""
    return {name: arr for name, arr in params.items()
            if not any(name.startswith(p) for p in exclude_prefixes)}

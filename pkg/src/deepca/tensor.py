"""Dense float64 tensors and the DCAT binary format.

Tensors are plain :class:`numpy.ndarray` objects with ``dtype=float64``.
The helpers here add the exact-shape checking used throughout the
package; broadcasting is limited to scalars.
"""

import struct

import numpy as np

__all__ = [
    "DimensionError",
    "FormatError",
    "as_tensor",
    "add",
    "sub",
    "scale",
    "hadamard",
    "dot",
    "norm2",
    "norm1",
    "count_nonzero",
    "tmax",
    "encode_dcat",
    "decode_dcat",
    "save_dcat",
    "load_dcat",
    "read_dcat_from",
]

DCAT_MAGIC = b"DCAT"
DCAT_VERSION = 1
DTYPE_F64 = 1


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class FormatError(ValueError):
    """A binary file does not match the expected layout."""


def as_tensor(a):
    """Return ``a`` as a C-contiguous float64 array."""
    return np.asarray(a, dtype=np.float64, order="C")


def _check_same(a, b):
    if np.ndim(a) and np.ndim(b) and np.shape(a) != np.shape(b):
        raise DimensionError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def add(a, b):
    _check_same(a, b)
    return as_tensor(a) + as_tensor(b)


def sub(a, b):
    _check_same(a, b)
    return as_tensor(a) - as_tensor(b)


def scale(alpha, a):
    return float(alpha) * as_tensor(a)


def hadamard(a, b):
    _check_same(a, b)
    return as_tensor(a) * as_tensor(b)


def dot(a, b):
    """Inner product over all entries."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def norm2(a):
    return float(np.linalg.norm(as_tensor(a).ravel()))


def norm1(a):
    return float(np.abs(as_tensor(a)).sum())


def count_nonzero(a, eps):
    """Number of entries with ``|a| > eps``."""
    return int(np.count_nonzero(np.abs(as_tensor(a)) > eps))


def tmax(a):
    return float(np.max(as_tensor(a)))


# -- DCAT ---------------------------------------------------------------------


def encode_dcat(a):
    """Serialize a tensor to DCAT bytes.

    Layout: ``b"DCAT"``, version byte, dtype byte (1 = f64), u32 rank,
    ``rank`` u32 dims, then the row-major little-endian f64 payload. All
    integers are little-endian.
    """
    a = as_tensor(a)
    if not np.all(np.isfinite(a)):
        raise ValueError("refusing to encode non-finite tensor")
    header = DCAT_MAGIC + bytes([DCAT_VERSION, DTYPE_F64])
    header += struct.pack("<I", a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.astype("<f8", copy=False).tobytes(order="C")


def read_dcat_from(buf, offset=0):
    """Decode one DCAT tensor from ``buf`` at ``offset``.

    Returns ``(tensor, next_offset)``.
    """
    buf = memoryview(buf)
    if bytes(buf[offset:offset + 4]) != DCAT_MAGIC:
        raise FormatError("bad DCAT magic")
    if len(buf) < offset + 10:
        raise FormatError("truncated DCAT header")
    version, dtype = buf[offset + 4], buf[offset + 5]
    if version != DCAT_VERSION:
        raise FormatError(f"unsupported DCAT version {version}")
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported DCAT dtype {dtype}")
    (rank,) = struct.unpack_from("<I", buf, offset + 6)
    pos = offset + 10
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated DCAT dims")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    if any(d <= 0 for d in dims):
        raise FormatError("DCAT dims must be positive")
    count = int(np.prod(dims, dtype=np.int64))
    end = pos + 8 * count
    if len(buf) < end:
        raise FormatError("truncated DCAT payload")
    data = np.frombuffer(buf[pos:end], dtype="<f8").astype(np.float64)
    return data.reshape(dims), end


def decode_dcat(data):
    a, end = read_dcat_from(data)
    if end != len(data):
        raise FormatError("trailing bytes after DCAT tensor")
    return a


def save_dcat(path, a):
    with open(path, "wb") as f:
        f.write(encode_dcat(a))


def load_dcat(path):
    with open(path, "rb") as f:
        return decode_dcat(f.read())

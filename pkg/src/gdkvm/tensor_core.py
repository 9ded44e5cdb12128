"""Dense array primitives shared by every other module.

Tensors are plain :class:`numpy.ndarray` objects. Functions preserve the
floating dtype of their input, so passing float64 arrays gives the 64-bit
mode used by oracles and gradient checks; float32 is the working default.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np
from scipy import special

DEFAULT_DTYPE = np.float32

__all__ = [
    "DEFAULT_DTYPE",
    "DimensionError",
    "as_tensor",
    "matmul",
    "softmax_rows",
    "sigmoid",
    "phi_kernel",
    "phi_grad",
    "gap_spatial",
    "expand_spatial",
    "conv2d",
    "make_rng",
    "derive_seed",
    "write_tensor",
    "read_tensor",
    "write_tensor_file",
    "read_tensor_file",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        return arr.astype(DEFAULT_DTYPE)
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax; the row max is subtracted first so large inputs stay finite."""
    x = as_tensor(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x) -> np.ndarray:
    x = as_tensor(x)
    out = special.expit(x)
    # keep the open interval even where float rounding saturates
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1.0 - info.eps / 2)


def phi_kernel(x) -> np.ndarray:
    """Positive feature map: ``x + 1`` for ``x >= 0`` and ``exp(x)`` below zero.

    Strictly positive, monotone and continuously differentiable at 0 (both
    branches have value 1 and slope 1 there).
    """
    x = as_tensor(x)
    return np.where(x >= 0, x + 1, np.exp(np.minimum(x, 0)))


def phi_grad(x) -> np.ndarray:
    x = as_tensor(x)
    return np.where(x >= 0, np.ones_like(x), np.exp(np.minimum(x, 0)))


def gap_spatial(x) -> np.ndarray:
    """Global average pool over the two spatial axes of an ``H x W x C`` map."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"expected (..., H, W, C), got {x.shape}")
    # shifted mean: exact for constant maps, so gap(expand(v)) == v bit for bit
    ref = x[..., :1, :1, :]
    return ref[..., 0, 0, :] + (x - ref).mean(axis=(-3, -2))


def expand_spatial(v, h: int, w: int) -> np.ndarray:
    v = as_tensor(v)
    if h < 1 or w < 1:
        raise DimensionError("spatial size must be positive")
    target = v.shape[:-1] + (h, w, v.shape[-1])
    return np.broadcast_to(v[..., None, None, :], target).copy()


def _im2col(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, tuple[int, int]]:
    pad = (k - 1) // 2
    n, h, w, c = x.shape
    ho, wo = -(-h // stride), -(-w // stride)
    if k == 1:
        cols = x[:, ::stride, ::stride]
        return cols.reshape(n * ho * wo, c), (ho, wo)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (N, Ho, Wo, C, k, k)
    # column order (dy, dx, c) matches a (k, k, Cin, Cout) kernel reshape
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    return cols, (ho, wo)


def conv2d(x, w, b=None, stride: int = 1) -> np.ndarray:
    """Zero-padded 'same' convolution in channels-last layout.

    ``x`` is ``H x W x Cin`` (or batched ``N x H x W x Cin``), ``w`` is
    ``k x k x Cin x Cout`` with odd ``k``. With ``stride > 1`` the output is
    the stride-1 result subsampled from the top-left corner.
    """
    x = as_tensor(x)
    w = as_tensor(w, x.dtype)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"bad conv operands {x.shape}, {w.shape}")
    k = w.shape[0]
    if w.shape[1] != k or k % 2 == 0:
        raise DimensionError(f"kernel must be square with odd size, got {w.shape[:2]}")
    if w.shape[2] != x.shape[-1]:
        raise DimensionError(f"input has {x.shape[-1]} channels, kernel expects {w.shape[2]}")
    cols, (ho, wo) = _im2col(x, k, stride)
    out = cols @ w.reshape(-1, w.shape[3])
    if b is not None:
        b = as_tensor(b, x.dtype)
        if b.shape != (w.shape[3],):
            raise DimensionError(f"bias shape {b.shape} != ({w.shape[3]},)")
        out = out + b
    out = out.reshape(x.shape[0], ho, wo, w.shape[3])
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

def derive_seed(seed: int, *keys: int | str) -> int:
    """Deterministic 64-bit child seed for a named sub-stream."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            # every byte counts, and the length keeps "ab" apart from "ab\0"
            raw = key.encode("utf-8")
            raw = raw.ljust(-(-len(raw) // 8) * 8, b"\0")
            words.append(len(key.encode("utf-8")) | 1 << 63)
            words.extend(int.from_bytes(raw[i:i + 8], "little") for i in range(0, len(raw), 8))
        else:
            words.append(int(key) & 0xFFFFFFFFFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Philox (counter-based) generator; streams are platform independent."""
    if keys:
        seed = derive_seed(seed, *keys)
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


# ---------------------------------------------------------------------------
# GDKV-T tensor files
# ---------------------------------------------------------------------------

MAGIC = b"GDKV"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


def write_tensor(fh: BinaryIO, arr) -> None:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_ or arr.dtype == np.uint8:
        code, data = 1, arr.astype(np.uint8)
    else:
        code, data = 0, arr.astype("<f4")
    if data.ndim > 255:
        raise DimensionError("rank too large for GDKV-T")
    fh.write(MAGIC + struct.pack("<BBBB", VERSION, code, data.ndim, 0))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(np.ascontiguousarray(data).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray | None:
    """Read one tensor; returns None at a clean end of stream."""
    head = fh.read(8)
    if not head:
        return None
    if len(head) < 8 or head[:4] != MAGIC:
        raise ValueError("not a GDKV-T stream")
    version, code, rank, _ = struct.unpack("<BBBB", head[4:])
    if version != VERSION or code not in _DTYPES:
        raise ValueError(f"unsupported GDKV-T version {version} / dtype {code}")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    raw = fh.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise ValueError("truncated GDKV-T payload")
    return np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def write_tensor_file(path, arr) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def read_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        out = read_tensor(fh)
    if out is None:
        raise ValueError(f"{path}: empty file")
    return out

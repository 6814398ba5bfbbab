"""Dense tensor arithmetic with a fixed reduction order.

Tensors are C-contiguous numpy arrays of ``float32`` (storage precision) or
``float64`` (gradient checking). Matrix products go through the compiled
kernels when the extension is importable, else through the numpy fallback;
both accumulate in ascending index order and agree bit for bit. Set
``UNICAD_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import CodecError, ContractError, ShapeError

if os.environ.get("UNICAD_PURE_PYTHON", "") not in ("", "0"):
    from . import _pykernels as _backend
    BACKEND = "python"
else:
    try:
        from . import _kernels as _backend
        BACKEND = "cython"
    except ImportError:  # extension not built
        from . import _pykernels as _backend
        BACKEND = "python"

MASK_FILL = -1e30

SINGLE = np.float32
DOUBLE = np.float64
_PRECISIONS = {"single": SINGLE, "double": DOUBLE}


def dtype_for(precision: str):
    try:
        return _PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}") from None


def tensor(data, dtype=SINGLE) -> np.ndarray:
    """Coerce ``data`` into a contiguous row-major tensor."""
    return np.ascontiguousarray(data, dtype=dtype)


def _common(a: np.ndarray, b: np.ndarray):
    dt = np.result_type(a.dtype, b.dtype)
    if dt not in (SINGLE, DOUBLE):
        dt = np.dtype(SINGLE) if dt.itemsize <= 4 else np.dtype(DOUBLE)
    return np.ascontiguousarray(a, dtype=dt), np.ascontiguousarray(b, dtype=dt)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` for 2-D operands, summed over the inner index in ascending order."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    a, b = _common(a, b)
    return _backend.matmul(a, b)


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matmul over a shared leading axis: ``(p, m, k) x (p, k, n)``."""
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"bmm expects 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} x {b.shape}")
    a, b = _common(a, b)
    return _backend.bmm(a, b)


def linear(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Apply ``x @ w (+ bias)`` over the last axis of ``x`` (any leading shape)."""
    lead = x.shape[:-1]
    out = matmul(x.reshape(-1, x.shape[-1]), w)
    if bias is not None:
        out += bias
    return out.reshape(*lead, w.shape[1])


def transpose(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return np.ascontiguousarray(a.T)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    a, b = _common(a, b)
    return a + b


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)``."""
    return x * (0.5 * (1.0 + erf(x / np.sqrt(2.0)))).astype(x.dtype)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return (cdf + x * pdf).astype(x.dtype)


def softmax_masked(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to positions where ``mask`` is 1.

    ``mask`` broadcasts against ``logits``. Masked positions come out as exact
    zeros; a row with no valid position is a contract violation.
    """
    valid = np.broadcast_to(np.asarray(mask) != 0, logits.shape)
    if not valid.any(axis=-1).all():
        raise ContractError("softmax_masked: a row has no valid position")
    z = np.where(valid, logits, logits.dtype.type(MASK_FILL))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    e[~valid] = 0
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6):
    """Normalize over the last axis. Returns the output only; see ``layer_norm_fwd``."""
    return layer_norm_fwd(x, gamma, beta, eps)[0]


def layer_norm_fwd(x, gamma, beta, eps=1e-6):
    if eps <= 0:
        raise ValueError("eps must be positive")
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm params {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = (1.0 / np.sqrt(var + x.dtype.type(eps))).astype(x.dtype)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd


def layer_norm_bwd(dy, xhat, rstd, gamma):
    """Gradient w.r.t. the layer-norm input (gamma/beta are frozen)."""
    g = dy * gamma
    return rstd * (g - g.mean(axis=-1, keepdims=True)
                   - xhat * (g * xhat).mean(axis=-1, keepdims=True))


# --- .uten tensor files -----------------------------------------------------

UTEN_MAGIC = b"UTEN"
UTEN_VERSION = 1


def save_uten(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = UTEN_MAGIC + struct.pack("<IB", UTEN_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_uten(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != UTEN_MAGIC:
        raise CodecError(f"{path}: bad magic (expected UTEN)")
    if len(raw) < 9:
        raise CodecError(f"{path}: truncated header")
    version, ndim = struct.unpack_from("<IB", raw, 4)
    if version != UTEN_VERSION:
        raise CodecError(f"{path}: unsupported version {version}")
    off = 9 + 4 * ndim
    if len(raw) < off:
        raise CodecError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", raw, 9)
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) != off + 4 * count:
        raise CodecError(f"{path}: data length {len(raw) - off} != 4*{count}")
    return np.frombuffer(raw, dtype="<f4", offset=off).astype(SINGLE).reshape(dims)

"""Pure-numpy fallback for the compiled kernels in ``_kernels.pyx``.

The reduction index is walked explicitly so the rounding sequence matches the
compiled loop exactly: start from zero, then ``c = c + a[:, t] * b[t, :]`` for
ascending ``t``.
"""

import numpy as np


def matmul(a, b):
    if a.dtype != b.dtype:
        raise TypeError("dtype mismatch")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for t in range(a.shape[1]):
        out += a[:, t, None] * b[None, t, :]
    return out


def bmm(a, b):
    if a.dtype != b.dtype:
        raise TypeError("dtype mismatch")
    out = np.zeros((a.shape[0], a.shape[1], b.shape[2]), dtype=a.dtype)
    for t in range(a.shape[2]):
        out += a[:, :, t, None] * b[:, None, t, :]
    return out

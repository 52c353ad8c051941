"""Pure numpy versions of the dense-layer kernels in ``_core.pyx``.

Sums are accumulated one term at a time in the same order as the compiled
loops; numpy's pairwise summation is deliberately avoided.
"""
from __future__ import annotations

import numpy as np


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    if w.shape[0] != x.shape[1]:
        raise ValueError("weight rows do not match input width")
    if b is not None and b.shape[0] != w.shape[1]:
        raise ValueError("bias length does not match layer width")
    acc = x[:, 0:1] * w[0]
    for k in range(1, x.shape[1]):
        acc = acc + x[:, k : k + 1] * w[k]
    if b is not None:
        acc = acc + b
    return np.ascontiguousarray(acc)


def dense_backward(a_prev, dz, w, need_input_grad):
    n, fan_in = a_prev.shape
    fan_out = dz.shape[1]
    if dz.shape[0] != n or w.shape != (fan_in, fan_out):
        raise ValueError("inconsistent shapes in dense_backward")
    dw = a_prev[0][:, None] * dz[0]
    db = dz[0].copy()
    for i in range(1, n):
        dw = dw + a_prev[i][:, None] * dz[i]
        db = db + dz[i]
    if not need_input_grad:
        return dw, db, None
    da = dz[:, 0:1] * w[:, 0]
    for j in range(1, fan_out):
        da = da + dz[:, j : j + 1] * w[:, j]
    return dw, db, np.ascontiguousarray(da)

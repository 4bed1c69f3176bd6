"""Minimal conv building blocks on NHWC tensors.

3x3 same-padding conv is written as nine shifted matmuls so everything
stays inside the autodiff core; downsampling is space-to-depth plus a
matmul (equivalent to a stride-2 kernel-2 conv) and upsampling is
nearest-neighbor.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def conv3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 conv, stride 1, zero padding. x [B,H,W,Cin], w [3,3,Cin,Cout]."""
    if w.data.shape[:2] != (3, 3):
        raise ValueError(f"conv3 expects a [3,3,Cin,Cout] kernel, got {w.data.shape}")
    bsz, h, wd, cin = x.data.shape
    if w.data.shape[2] != cin:
        raise ValueError(f"kernel Cin {w.data.shape[2]} != input channels {cin}")
    xp = x.pad2d(1)
    out = None
    for di in range(3):
        for dj in range(3):
            term = xp[:, di:di + h, dj:dj + wd, :] @ w[di, dj]
            out = term if out is None else out + term
    return out + b


def down2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-2 2x2 conv via space-to-depth. w [4*Cin, Cout]."""
    bsz, h, wd, c = x.data.shape
    if h % 2 or wd % 2:
        raise ValueError(f"down2 needs even spatial dims, got {h}x{wd}")
    z = x.reshape(bsz, h // 2, 2, wd // 2, 2, c)
    z = z.transpose(0, 1, 3, 2, 4, 5).reshape(bsz, h // 2, wd // 2, 4 * c)
    return z @ w + b


def up2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsample."""
    bsz, h, wd, c = x.data.shape
    z = x.reshape(bsz, h, 1, wd, 1, c) * Tensor(np.ones((1, 1, 2, 1, 2, 1)))
    return z.reshape(bsz, 2 * h, 2 * wd, c)

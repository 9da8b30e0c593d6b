"""Pure-numpy convolution kernels (im2col + BLAS gemm).

Layout is channels-last: x (B, H, W, Cin), w (kh, kw, Cin, Cout).
The compiled extension implements the same three entry points with direct
loops; both backends must agree to float rounding.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _patches(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    view = as_strided(
        xp,
        shape=(b, ho, wo, kh, kw, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return view.reshape(b * ho * wo, kh * kw * c)


def conv2d_forward(x, w, b, stride, pad):
    batch, h, wdt, cin = x.shape
    kh, kw, _, cout = w.shape
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(wdt, kw, stride, pad)
    xp = _pad(x, pad)
    cols = _patches(xp, kh, kw, stride, ho, wo)
    y = cols @ w.reshape(kh * kw * cin, cout)
    if b is not None:
        y += b
    return y.reshape(batch, ho, wo, cout)


def conv2d_grad_input(dy, w, stride, pad, h, wdt):
    batch, ho, wo, cout = dy.shape
    kh, kw, cin, _ = w.shape
    dxp = np.zeros((batch, h + 2 * pad, wdt + 2 * pad, cin), dtype=dy.dtype)
    for ki in range(kh):
        for kj in range(kw):
            contrib = dy @ w[ki, kj].T
            dxp[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride, :] += contrib
    if pad == 0:
        return dxp
    return dxp[:, pad : pad + h, pad : pad + wdt, :]


def conv2d_grad_weights(x, dy, stride, pad, kh, kw):
    batch, h, wdt, cin = x.shape
    _, ho, wo, cout = dy.shape
    xp = _pad(x, pad)
    dw = np.empty((kh, kw, cin, cout), dtype=dy.dtype)
    dy_flat = dy.reshape(-1, cout)
    for ki in range(kh):
        for kj in range(kw):
            xs = xp[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride, :]
            dw[ki, kj] = xs.reshape(-1, cin).T @ dy_flat
    db = dy_flat.sum(axis=0)
    return dw, db

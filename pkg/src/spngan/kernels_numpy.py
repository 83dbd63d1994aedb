"""Pure-numpy convolution kernels (stride 1, odd kernel, zero same-padding).

Standard convolutions are written as k*k shifted GEMMs so the heavy lifting
stays inside BLAS; depthwise convolutions are k*k shifted broadcast FMAs.
Layouts: feature maps (B, H, W, C), dense kernels (k, k, Cin, Cout),
depthwise kernels (k, k, C).
"""

import numpy as np


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def conv2d_forward(x, w):
    """Correlate x with w. Returns (B, H, W, Cout)."""
    b, h, wd, ci = x.shape
    k = w.shape[0]
    if k == 1:
        return x @ w[0, 0]
    p = k // 2
    xp = _pad(x, p)
    out = np.zeros((b, h, wd, w.shape[3]), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            out += xp[:, u:u + h, v:v + wd, :] @ w[u, v]
    return out


def conv2d_input_grad(dy, w):
    """Gradient of conv2d_forward w.r.t. its input. dy is (B, H, W, Cout)."""
    b, h, wd, co = dy.shape
    k, ci = w.shape[0], w.shape[2]
    if k == 1:
        return dy @ w[0, 0].T
    p = k // 2
    dxp = np.zeros((b, h + 2 * p, wd + 2 * p, ci), dtype=dy.dtype)
    for u in range(k):
        for v in range(k):
            dxp[:, u:u + h, v:v + wd, :] += dy @ w[u, v].T
    return np.ascontiguousarray(dxp[:, p:p + h, p:p + wd, :])


def conv2d_kernel_grad(x, dy, k):
    """Gradient of conv2d_forward w.r.t. the kernel. Returns (k, k, Cin, Cout)."""
    b, h, wd, ci = x.shape
    co = dy.shape[3]
    if k == 1:
        return np.tensordot(x, dy, axes=([0, 1, 2], [0, 1, 2]))[None, None]
    p = k // 2
    xp = _pad(x, p)
    dw = np.empty((k, k, ci, co), dtype=dy.dtype)
    for u in range(k):
        for v in range(k):
            dw[u, v] = np.tensordot(xp[:, u:u + h, v:v + wd, :], dy,
                                    axes=([0, 1, 2], [0, 1, 2]))
    return dw


def depthwise_forward(x, kern):
    """Correlate each channel of x with its own k*k kernel. kern is (k, k, C)."""
    b, h, wd, c = x.shape
    k = kern.shape[0]
    p = k // 2
    xp = _pad(x, p)
    out = np.zeros_like(x)
    for u in range(k):
        for v in range(k):
            out += xp[:, u:u + h, v:v + wd, :] * kern[u, v]
    return out


def depthwise_input_grad(dy, kern):
    """Gradient of depthwise_forward w.r.t. its input."""
    b, h, wd, c = dy.shape
    k = kern.shape[0]
    p = k // 2
    dxp = np.zeros((b, h + 2 * p, wd + 2 * p, c), dtype=dy.dtype)
    for u in range(k):
        for v in range(k):
            dxp[:, u:u + h, v:v + wd, :] += dy * kern[u, v]
    if p == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, p:p + h, p:p + wd, :])


def depthwise_kernel_grad(x, dy, k):
    """Gradient of depthwise_forward w.r.t. the kernel. Returns (k, k, C)."""
    b, h, wd, c = x.shape
    p = k // 2
    xp = _pad(x, p)
    dk = np.empty((k, k, c), dtype=dy.dtype)
    for u in range(k):
        for v in range(k):
            dk[u, v] = np.einsum('bhwc,bhwc->c', xp[:, u:u + h, v:v + wd, :], dy,
                                 optimize=True)
    return dk

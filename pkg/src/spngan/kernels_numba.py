"""Numba-jitted convolution kernels, API-compatible with kernels_numpy.

Standard convolutions run per-image im2col feeding BLAS np.dot; depthwise
convolutions are direct loops with the channel loop innermost so the inner
body vectorizes over contiguous memory.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def _conv2d_gemm(x, wmat, k):
    b, h, wd, ci = x.shape
    co = wmat.shape[1]
    p = k // 2
    out = np.empty((b, h, wd, co), dtype=x.dtype)
    col = np.zeros((h * wd, k * k * ci), dtype=x.dtype)
    for bi in range(b):
        col[:] = 0.0
        for y in range(h):
            for u in range(k):
                yy = y + u - p
                if yy < 0 or yy >= h:
                    continue
                for xx in range(wd):
                    row = y * wd + xx
                    for v in range(k):
                        xv = xx + v - p
                        if xv < 0 or xv >= wd:
                            continue
                        base = (u * k + v) * ci
                        for c in range(ci):
                            col[row, base + c] = x[bi, yy, xv, c]
        out[bi] = np.dot(col, wmat).reshape(h, wd, co)
    return out


def conv2d_forward(x, w):
    """Correlate x (B, H, W, Cin) with w (k, k, Cin, Cout)."""
    k = w.shape[0]
    wmat = np.ascontiguousarray(w.reshape(k * k * w.shape[2], w.shape[3]))
    return _conv2d_gemm(np.ascontiguousarray(x), wmat, k)


def conv2d_input_grad(dy, w):
    """Gradient w.r.t. the conv input: correlate dy with the flipped, transposed kernel."""
    k = w.shape[0]
    wt = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    return conv2d_forward(dy, wt)


@njit(cache=True, fastmath=True)
def _conv2d_kernel_grad(x, dymat, k):
    b, h, wd, ci = x.shape
    co = dymat.shape[1]
    p = k // 2
    dw = np.zeros((k, k, ci, co), dtype=dymat.dtype)
    sh = np.zeros((b * h * wd, ci), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            sh[:] = 0.0
            for bi in range(b):
                for y in range(h):
                    yy = y + u - p
                    if yy < 0 or yy >= h:
                        continue
                    rowbase = (bi * h + y) * wd
                    for xx in range(wd):
                        xv = xx + v - p
                        if xv < 0 or xv >= wd:
                            continue
                        row = rowbase + xx
                        for c in range(ci):
                            sh[row, c] = x[bi, yy, xv, c]
            dw[u, v] = np.dot(sh.T, dymat)
    return dw


def conv2d_kernel_grad(x, dy, k):
    """Gradient w.r.t. the conv kernel. Returns (k, k, Cin, Cout)."""
    b, h, wd, co = dy.shape
    dymat = np.ascontiguousarray(dy).reshape(b * h * wd, co)
    return _conv2d_kernel_grad(np.ascontiguousarray(x), dymat, k)


@njit(cache=True, fastmath=True)
def _depthwise(x, kern):
    b, h, wd, c = x.shape
    k = kern.shape[0]
    p = k // 2
    out = np.zeros((b, h, wd, c), dtype=x.dtype)
    for bi in range(b):
        for y in range(h):
            for u in range(k):
                yy = y + u - p
                if yy < 0 or yy >= h:
                    continue
                for xx in range(wd):
                    for v in range(k):
                        xv = xx + v - p
                        if xv < 0 or xv >= wd:
                            continue
                        for ci in range(c):
                            out[bi, y, xx, ci] += x[bi, yy, xv, ci] * kern[u, v, ci]
    return out


def depthwise_forward(x, kern):
    """Correlate each channel with its own kernel. kern is (k, k, C)."""
    return _depthwise(np.ascontiguousarray(x), np.ascontiguousarray(kern))


def depthwise_input_grad(dy, kern):
    """Gradient w.r.t. the depthwise input: correlate dy with the flipped kernel."""
    return _depthwise(np.ascontiguousarray(dy),
                      np.ascontiguousarray(kern[::-1, ::-1]))


@njit(cache=True, fastmath=True)
def _depthwise_kernel_grad(x, dy, k):
    b, h, wd, c = x.shape
    p = k // 2
    dk = np.zeros((k, k, c), dtype=dy.dtype)
    for u in range(k):
        for v in range(k):
            for bi in range(b):
                for y in range(h):
                    yy = y + u - p
                    if yy < 0 or yy >= h:
                        continue
                    for xx in range(wd):
                        xv = xx + v - p
                        if xv < 0 or xv >= wd:
                            continue
                        for ci in range(c):
                            dk[u, v, ci] += x[bi, yy, xv, ci] * dy[bi, y, xx, ci]
    return dk


def depthwise_kernel_grad(x, dy, k):
    """Gradient w.r.t. the depthwise kernel. Returns (k, k, C)."""
    return _depthwise_kernel_grad(np.ascontiguousarray(x),
                                  np.ascontiguousarray(dy), k)

"""Spectral normalization via power iteration.

Weights are viewed as (out, fan_in) matrices; a persistent left vector u is
refined by one power iteration per training forward and the weight is used as
w / sigma_hat with sigma_hat = u^T W v. Gradients treat u and v as constants,
the standard estimator:

    dW = dWbar / sigma - <dWbar, Wbar> u v^T / sigma
"""

import numpy as np

_EPS = 1e-12


def l2_normalize(v):
    return v / (np.linalg.norm(v) + _EPS)


def power_iteration(w, u, iters=1):
    """Refine (u, v) on matrix w. Returns (u, v, sigma_hat)."""
    for _ in range(max(1, iters)):
        v = l2_normalize(w.T @ u)
        u = l2_normalize(w @ v)
    sigma = float(u @ (w @ v))
    return u, v, sigma


class SpectralNorm:
    """State holder for one spectrally normalized weight matrix."""

    def __init__(self, out_dim, rng, iters=1, dtype=np.float32):
        self.u = l2_normalize(rng.standard_normal(out_dim)).astype(dtype)
        self.iters = iters

    def normalize(self, w, train=True):
        """w is (out, fan_in). Returns (w / sigma, cache)."""
        if train:
            u, v, sigma = power_iteration(w, self.u, self.iters)
            self.u = u
        else:
            u = self.u
            v = l2_normalize(w.T @ u)
            sigma = float(u @ (w @ v))
        denom = sigma + _EPS
        wbar = w / denom
        return wbar, (u, v, wbar, denom)

    def backward(self, dwbar, cache):
        u, v, wbar, denom = cache
        coef = np.vdot(dwbar, wbar)
        return (dwbar - coef * np.outer(u, v)) / denom

"""Adversarial losses. Every function returns (loss, dlogit...) pairs so the
training loop can seed manual backprop directly with the logit gradients."""

import numpy as np


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def d_hinge(real, fake):
    loss = np.maximum(0.0, 1.0 - real).mean() + np.maximum(0.0, 1.0 + fake).mean()
    dreal = -(real < 1.0).astype(real.dtype) / real.size
    dfake = (fake > -1.0).astype(fake.dtype) / fake.size
    return float(loss), dreal, dfake


def g_hinge(fake):
    return float(-fake.mean()), np.full_like(fake, -1.0 / fake.size)


def d_ce(real, fake):
    """Non-saturating cross entropy in softplus form."""
    loss = _softplus(-real).mean() + _softplus(fake).mean()
    dreal = -_sigmoid(-real) / real.size
    dfake = _sigmoid(fake) / fake.size
    return float(loss), dreal, dfake


def g_ce(fake):
    loss = _softplus(-fake).mean()
    return float(loss), -_sigmoid(-fake) / fake.size


def d_lsgan(real, fake):
    loss = 0.5 * ((real - 1.0) ** 2).mean() + 0.5 * (fake ** 2).mean()
    return float(loss), (real - 1.0) / real.size, fake / fake.size


def g_lsgan(fake):
    loss = 0.5 * ((fake - 1.0) ** 2).mean()
    return float(loss), (fake - 1.0) / fake.size


GAN_LOSSES = {
    "hinge": (d_hinge, g_hinge),
    "ce": (d_ce, g_ce),
    "lsgan": (d_lsgan, g_lsgan),
}

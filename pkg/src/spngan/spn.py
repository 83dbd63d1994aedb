"""Self pixel-wise normalization: functional ops with hand-derived gradients.

The layer normalizes every channel over (batch, height, width), predicts a
foreground mask from the raw input through a 1x1 projection + channel norm +
sigmoid, and estimates per-pixel affine parameters by convolving the mask and
its complement with learned per-channel kernel banks:

    y = gamma(m, 1-m) * normalize(x) + beta(m, 1-m)

Everything here is a pure function: running statistics come in and go out as
immutable values, and each forward returns the cache its backward needs, so
the whole stack is finite-difference checkable.

Errors: ValueError for shape/argument mismatches, FloatingPointError for
non-finite inputs, RuntimeError for eval-mode use before any statistics were
accumulated.
"""

import os
from dataclasses import dataclass, replace

import numpy as np

from . import backend

VALIDATE = os.environ.get("SPNGAN_VALIDATE", "0").lower() not in ("", "0", "false")

# Widest logit range whose sigmoid stays strictly inside (0,1) in the working
# precision. Keeps the mask open-interval and the complement identity
# m + (1-m) == 1 exact under float rounding; the true gradient beyond the
# clamp is below rounding noise anyway.
_LOGIT_LIMITS = {np.dtype(np.float32): 15.0, np.dtype(np.float64): 30.0}


def sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


@dataclass(frozen=True)
class RunningStats:
    """Immutable running mean/variance for one normalization site."""
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    initialized: bool = False


def make_stats(channels, momentum=0.9, eps=1e-5, dtype=np.float32):
    return RunningStats(np.zeros(channels, dtype=dtype),
                        np.ones(channels, dtype=dtype), momentum, eps, False)


@dataclass(frozen=True)
class SpnStats:
    """Running statistics for both normalization sites inside one layer."""
    main: RunningStats
    mask: RunningStats


@dataclass
class SpnParams:
    """Learnable tensors of one layer.

    proj_w is (1, 1, C, Cm); norm_scale/shift are (Cm,) or, class-conditional,
    (num_classes, Cm). Kernel banks are depthwise (k, k, C) or, for the
    standard-conv variant, dense (k, k, Cm, C). The conditional extension adds
    a class embedding (num_classes, E), a kernel modulation map (E, 4*C) and an
    optional latent bias map (z_dim, 2*C); all three zero/identity at init so
    the conditional layer starts exactly equal to the unconditional one.
    """
    proj_w: np.ndarray
    proj_b: np.ndarray
    norm_scale: np.ndarray
    norm_shift: np.ndarray
    k_gamma_fg: np.ndarray
    k_gamma_bg: np.ndarray
    k_beta_fg: np.ndarray
    k_beta_bg: np.ndarray
    class_emb: np.ndarray = None
    kernel_scale_w: np.ndarray = None
    latent_bias_w: np.ndarray = None

    @property
    def conditional(self):
        return self.class_emb is not None

    @property
    def mask_channels(self):
        return self.proj_w.shape[3]

    @property
    def kernel_size(self):
        return self.k_gamma_fg.shape[0]

    @property
    def standard_conv(self):
        return self.k_gamma_fg.ndim == 4

    def field_names(self):
        names = ["proj_w", "proj_b", "norm_scale", "norm_shift",
                 "k_gamma_fg", "k_gamma_bg", "k_beta_fg", "k_beta_bg"]
        if self.conditional:
            names += ["class_emb", "kernel_scale_w"]
            if self.latent_bias_w is not None:
                names.append("latent_bias_w")
        return names


def orthogonal_matrix(rows, cols, rng, dtype):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].astype(dtype)


def init_spn_params(channels, kernel_size=3, rng=None, mask_channels=None,
                    standard_conv=False, num_classes=0, emb_dim=0, z_dim=0,
                    latent_bias=True, momentum=0.9, eps=1e-5, dtype=np.float32):
    """Identity-at-init parameters and fresh statistics for one layer.

    Both gamma banks start as center-tap kernels summing the mask with its
    complement, so gamma == 1 and beta == 0 exactly and the layer reduces to
    plain channel normalization regardless of the mask.
    """
    if kernel_size % 2 != 1:
        raise ValueError("kernel_size must be odd, got %d" % kernel_size)
    if rng is None:
        rng = np.random.default_rng()
    cm = channels if mask_channels is None else mask_channels
    c = kernel_size // 2
    proj_w = (0.02 * orthogonal_matrix(channels, cm, rng, dtype))[None, None]
    proj_b = np.zeros(cm, dtype=dtype)
    if num_classes and emb_dim:
        norm_scale = np.ones((num_classes, cm), dtype=dtype)
        norm_shift = np.zeros((num_classes, cm), dtype=dtype)
    else:
        norm_scale = np.ones(cm, dtype=dtype)
        norm_shift = np.zeros(cm, dtype=dtype)
    if standard_conv:
        banks = [np.zeros((kernel_size, kernel_size, cm, channels), dtype=dtype)
                 for _ in range(4)]
        banks[0][c, c] = 1.0 / cm
        banks[1][c, c] = 1.0 / cm
    else:
        banks = [np.zeros((kernel_size, kernel_size, channels), dtype=dtype)
                 for _ in range(4)]
        banks[0][c, c] = 1.0
        banks[1][c, c] = 1.0
    params = SpnParams(proj_w, proj_b, norm_scale, norm_shift, *banks)
    if num_classes and emb_dim:
        params.class_emb = (0.02 * rng.standard_normal(
            (num_classes, emb_dim))).astype(dtype)
        params.kernel_scale_w = np.zeros((emb_dim, 4 * channels), dtype=dtype)
        if latent_bias:
            params.latent_bias_w = np.zeros((z_dim, 2 * channels), dtype=dtype)
    stats = SpnStats(make_stats(channels, momentum, eps, dtype),
                     make_stats(cm, momentum, eps, dtype))
    return params, stats


def _check_finite(x, what):
    if not np.isfinite(x).all():
        raise FloatingPointError("non-finite values in %s" % what)


def channelwise_normalize(x, stats, train=True):
    """Normalize each channel over (B, H, W). Returns (xhat, new_stats, cache).

    Train mode uses batch statistics (biased variance) and blends them into
    the running values with the configured momentum; eval mode uses the
    running values and requires at least one prior train-mode call.
    """
    if x.ndim != 4:
        raise ValueError("expected (B, H, W, C) input, got shape %r" % (x.shape,))
    if x.shape[3] != stats.mean.shape[0]:
        raise ValueError("channel mismatch: input has %d, stats have %d"
                         % (x.shape[3], stats.mean.shape[0]))
    _check_finite(x, "normalization input")
    if train:
        mu = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        sigma = np.sqrt(var + stats.eps)
        xhat = (x - mu) / sigma
        mom = stats.momentum
        new_stats = replace(
            stats,
            mean=(mom * stats.mean + (1.0 - mom) * mu).astype(stats.mean.dtype),
            var=(mom * stats.var + (1.0 - mom) * var).astype(stats.var.dtype),
            initialized=True)
    else:
        if not stats.initialized:
            raise RuntimeError("eval-mode normalization with uninitialized statistics")
        sigma = np.sqrt(stats.var + stats.eps).astype(x.dtype)
        xhat = (x - stats.mean.astype(x.dtype)) / sigma
        new_stats = stats
    cache = (xhat, sigma, train)
    return xhat, new_stats, cache


def channelwise_normalize_backward(cache, dy):
    xhat, sigma, train = cache
    if not train:
        return dy / sigma
    dmean = dy.mean(axis=(0, 1, 2))
    dproj = (dy * xhat).mean(axis=(0, 1, 2))
    return (dy - dmean - xhat * dproj) / sigma


def invert_mask(m):
    """Exact complement. For m in (0,1), m + invert_mask(m) == 1 in ieee754."""
    return 1.0 - m


def _check_mask(m, minv):
    if m.min() <= 0.0 or m.max() >= 1.0:
        raise FloatingPointError("mask left the open interval (0, 1)")
    if not ((m + minv) == 1.0).all():
        raise FloatingPointError("mask complement identity violated")


def build_self_latent_mask(x, params, stats, train=True, cond=None):
    """Foreground mask from the raw input: 1x1 proj -> channel norm -> affine
    -> sigmoid. Returns (m, new_stats, cache).

    The affine is the norm's learnable pair; with class-conditional params it
    is looked up per sample from (num_classes, Cm) tables, sharing the batch
    statistics across classes.
    """
    if x.shape[3] != params.proj_w.shape[2]:
        raise ValueError("channel mismatch: input has %d, projection expects %d"
                         % (x.shape[3], params.proj_w.shape[2]))
    conditional_norm = params.norm_scale.ndim == 2
    if conditional_norm and cond is None:
        raise ValueError("class-conditional mask norm requires cond labels")
    if not conditional_norm and cond is not None:
        raise ValueError("cond labels passed to an unconditional mask norm")
    p = x @ params.proj_w[0, 0] + params.proj_b
    phat, new_stats, ncache = channelwise_normalize(p, stats, train)
    if conditional_norm:
        s = params.norm_scale[cond][:, None, None, :]
        t = params.norm_shift[cond][:, None, None, :]
    else:
        s = params.norm_scale
        t = params.norm_shift
    a = phat * s + t
    lim = _LOGIT_LIMITS[np.dtype(a.dtype)]
    m = sigmoid(np.clip(a, -lim, lim))
    cache = (x, phat, ncache, s, m, cond, params)
    return m, new_stats, cache


def build_self_latent_mask_backward(cache, dm):
    """Returns (dx, grads) with grads for proj_w/proj_b/norm_scale/norm_shift."""
    x, phat, ncache, s, m, cond, params = cache
    da = dm * m * (1.0 - m)
    if params.norm_scale.ndim == 2:
        ds = np.zeros_like(params.norm_scale)
        dt = np.zeros_like(params.norm_shift)
        np.add.at(ds, cond, (da * phat).sum(axis=(1, 2)))
        np.add.at(dt, cond, da.sum(axis=(1, 2)))
    else:
        ds = (da * phat).sum(axis=(0, 1, 2))
        dt = da.sum(axis=(0, 1, 2))
    dphat = da * s
    dp = channelwise_normalize_backward(ncache, dphat)
    w = params.proj_w[0, 0]
    dw = np.tensordot(x, dp, axes=([0, 1, 2], [0, 1, 2]))[None, None]
    db = dp.sum(axis=(0, 1, 2))
    dx = dp @ w.T
    grads = {"proj_w": dw, "proj_b": db, "norm_scale": ds, "norm_shift": dt}
    return dx, grads


def _bank_outputs(m, minv, params):
    """Raw bank responses (gamma_fg, gamma_bg, beta_fg, beta_bg) plus the
    (possibly channel-broadcast) mask actually fed to depthwise kernels."""
    if params.standard_conv:
        conv = backend.conv2d_forward
        mb, mbinv = m, minv
    else:
        conv = backend.depthwise_forward
        c = params.k_gamma_fg.shape[2]
        if m.shape[3] == c:
            mb, mbinv = m, minv
        elif m.shape[3] == 1:
            mb = np.repeat(m, c, axis=3)
            mbinv = np.repeat(minv, c, axis=3)
        else:
            raise ValueError("mask has %d channels, banks expect %d or 1"
                             % (m.shape[3], c))
    outs = (conv(mb, params.k_gamma_fg), conv(mbinv, params.k_gamma_bg),
            conv(mb, params.k_beta_fg), conv(mbinv, params.k_beta_bg))
    return outs, mb, mbinv


def estimate_affine_field(m, m_inv, params, cond=None, z=None):
    """Per-pixel (gamma, beta) from the mask pair. Returns (gamma, beta, cache).

    gamma = conv(m, K_gamma_fg) + conv(m_inv, K_gamma_bg), beta likewise.
    Conditional params scale each bank per channel by (1 + proj(embedding))
    and, when the latent map is present, add a per-channel bias projected
    from z. Bank scaling commutes with the convolution, so the base response
    is computed once and modulated per sample.
    """
    if m.shape != m_inv.shape:
        raise ValueError("mask and complement shapes differ")
    if VALIDATE:
        _check_mask(m, m_inv)
    (a1, a2, b1, b2), mb, mbinv = _bank_outputs(m, m_inv, params)
    if not params.conditional:
        if cond is not None or z is not None:
            raise ValueError("cond/z passed to unconditional affine params")
        gamma = a1 + a2
        beta = b1 + b2
        cache = (params, mb, mbinv, None)
        return gamma, beta, cache
    if cond is None:
        raise ValueError("conditional affine params require cond labels")
    c = a1.shape[3]
    emb = params.class_emb[cond]
    scales = 1.0 + (emb @ params.kernel_scale_w).reshape(-1, 4, c)
    if params.latent_bias_w is not None:
        if z is None:
            raise ValueError("latent bias map requires z")
        tb = (z @ params.latent_bias_w).reshape(-1, 2, c)
        tg, tbeta = tb[:, 0], tb[:, 1]
    else:
        tg = tbeta = None
    sg1 = scales[:, 0][:, None, None, :]
    sg2 = scales[:, 1][:, None, None, :]
    sb1 = scales[:, 2][:, None, None, :]
    sb2 = scales[:, 3][:, None, None, :]
    gamma = sg1 * a1 + sg2 * a2
    beta = sb1 * b1 + sb2 * b2
    if tg is not None:
        gamma = gamma + tg[:, None, None, :]
        beta = beta + tbeta[:, None, None, :]
    cache = (params, mb, mbinv, (a1, a2, b1, b2, scales, emb, cond, z))
    return gamma, beta, cache


def _bank_backward(params, mb, mbinv, d1, d2, d3, d4):
    """Gradients of the four bank responses back to kernels and the mask pair."""
    k = params.kernel_size
    if params.standard_conv:
        kgrad, igrad = backend.conv2d_kernel_grad, backend.conv2d_input_grad
    else:
        kgrad, igrad = backend.depthwise_kernel_grad, backend.depthwise_input_grad
    grads = {
        "k_gamma_fg": kgrad(mb, d1, k), "k_gamma_bg": kgrad(mbinv, d2, k),
        "k_beta_fg": kgrad(mb, d3, k), "k_beta_bg": kgrad(mbinv, d4, k),
    }
    dmb = igrad(d1, params.k_gamma_fg) + igrad(d3, params.k_beta_fg)
    dmbinv = igrad(d2, params.k_gamma_bg) + igrad(d4, params.k_beta_bg)
    return grads, dmb, dmbinv


def estimate_affine_field_backward(cache, dgamma, dbeta):
    """Returns (dm, dm_inv, grads, dz)."""
    params, mb, mbinv, cond_cache = cache
    if cond_cache is None:
        grads, dmb, dmbinv = _bank_backward(params, mb, mbinv,
                                            dgamma, dgamma, dbeta, dbeta)
        dz = None
    else:
        a1, a2, b1, b2, scales, emb, cond, z = cond_cache
        c = a1.shape[3]
        sg1 = scales[:, 0][:, None, None, :]
        sg2 = scales[:, 1][:, None, None, :]
        sb1 = scales[:, 2][:, None, None, :]
        sb2 = scales[:, 3][:, None, None, :]
        ds = np.stack([(dgamma * a1).sum(axis=(1, 2)),
                       (dgamma * a2).sum(axis=(1, 2)),
                       (dbeta * b1).sum(axis=(1, 2)),
                       (dbeta * b2).sum(axis=(1, 2))], axis=1).reshape(-1, 4 * c)
        grads, dmb, dmbinv = _bank_backward(params, mb, mbinv,
                                            dgamma * sg1, dgamma * sg2,
                                            dbeta * sb1, dbeta * sb2)
        grads["kernel_scale_w"] = emb.T @ ds
        demb_rows = ds @ params.kernel_scale_w.T
        demb = np.zeros_like(params.class_emb)
        np.add.at(demb, cond, demb_rows)
        grads["class_emb"] = demb
        dz = None
        if params.latent_bias_w is not None:
            dt = np.concatenate([dgamma.sum(axis=(1, 2)),
                                 dbeta.sum(axis=(1, 2))], axis=1)
            grads["latent_bias_w"] = z.T @ dt
            dz = dt @ params.latent_bias_w.T
    if not params.standard_conv and mb.shape[3] != 1 and params.proj_w.shape[3] == 1:
        # single-channel mask was broadcast across bank channels
        dm = dmb.sum(axis=3, keepdims=True)
        dminv = dmbinv.sum(axis=3, keepdims=True)
    else:
        dm, dminv = dmb, dmbinv
    return dm, dminv, grads, dz


def spn_forward(x, params, stats, train=True, cond=None, z=None):
    """Full layer: y = gamma * normalize(x) + beta. Returns (y, new_stats, cache).

    The mask is built from the raw (pre-normalization) input. cond/z are
    required exactly when params carry the conditional extension.
    """
    if params.conditional and cond is None:
        raise ValueError("conditional params require cond labels")
    if not params.conditional and (cond is not None or z is not None):
        raise ValueError("cond/z passed to an unconditional layer")
    xhat, new_main, main_cache = channelwise_normalize(x, stats.main, train)
    mask_cond = cond if params.norm_scale.ndim == 2 else None
    m, new_mask, mcache = build_self_latent_mask(x, params, stats.mask, train,
                                                 cond=mask_cond)
    minv = invert_mask(m)
    gamma, beta, acache = estimate_affine_field(
        m, minv, params, cond=cond if params.conditional else None,
        z=z if params.conditional and params.latent_bias_w is not None else None)
    y = gamma * xhat + beta
    new_stats = SpnStats(new_main, new_mask)
    cache = (xhat, gamma, main_cache, mcache, acache)
    return y, new_stats, cache


def spn_backward(cache, dy):
    """Returns (dx, grads, dz); grads keys mirror SpnParams field names."""
    xhat, gamma, main_cache, mcache, acache = cache
    dgamma = dy * xhat
    dbeta = dy
    dxhat = dy * gamma
    dm, dminv, grads, dz = estimate_affine_field_backward(acache, dgamma, dbeta)
    dm_total = dm - dminv
    dx_mask, mask_grads = build_self_latent_mask_backward(mcache, dm_total)
    grads.update(mask_grads)
    dx_main = channelwise_normalize_backward(main_cache, dxhat)
    return dx_main + dx_mask, grads, dz


def cspn_forward(x, cond, z, params, stats, train=True):
    """Conditional layer entry point; validates that params are conditional."""
    if not params.conditional:
        raise ValueError("cspn_forward requires conditional params")
    if cond is None:
        raise ValueError("cond labels are required")
    if params.latent_bias_w is not None and z is None:
        raise ValueError("z is required when the latent bias map is present")
    return spn_forward(x, params, stats, train=train, cond=cond, z=z)

"""Central finite-difference checks for the normalization core.

Every op is checked in float64 against (f(x + eps) - f(x - eps)) / 2 eps on a
scalar probe loss sum(y * r) with fixed random r. run_spn_gradcheck covers
each op and the full composites and returns per-check worst relative errors.
"""

import time

import numpy as np

from . import spn


def fd_gradient(f, x, eps=1e-5):
    """Gradient of the scalar closure f w.r.t. x by central differences.

    f must recompute from current x contents; x is perturbed in place."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(a, b):
    """Worst deviation relative to the gradient scale, floored at 1 so
    identically-zero gradients (for example a bias ahead of train-mode
    normalization) compare against finite-difference roundoff in absolute
    terms instead of dividing noise by noise."""
    denom = max(np.abs(a).max(), np.abs(b).max(), 1.0)
    return float(np.abs(a - b).max() / denom)


def _probe(rng, shape):
    return rng.standard_normal(shape)


def _check_normalize(rng, shape):
    x = rng.standard_normal(shape)
    stats = spn.make_stats(shape[3], dtype=np.float64)
    r = _probe(rng, shape)

    def loss():
        y, _, _ = spn.channelwise_normalize(x, stats, train=True)
        return float((y * r).sum())

    _, _, cache = spn.channelwise_normalize(x, stats, train=True)
    dx = spn.channelwise_normalize_backward(cache, r)
    errs = [rel_err(dx, fd_gradient(loss, x))]

    # eval path needs accumulated statistics first
    _, stats2, _ = spn.channelwise_normalize(x, stats, train=True)

    def loss_eval():
        y, _, _ = spn.channelwise_normalize(x, stats2, train=False)
        return float((y * r).sum())

    _, _, cache_e = spn.channelwise_normalize(x, stats2, train=False)
    dx_e = spn.channelwise_normalize_backward(cache_e, r)
    errs.append(rel_err(dx_e, fd_gradient(loss_eval, x)))
    return max(errs)


def _mask_setup(rng, shape, conditional=False, num_classes=3):
    c = shape[3]
    params, stats = spn.init_spn_params(
        c, kernel_size=3, rng=rng,
        num_classes=num_classes if conditional else 0,
        emb_dim=4 if conditional else 0,
        z_dim=5 if conditional else 0, dtype=np.float64)
    # move away from the identity point so gradients are generic
    for name in params.field_names():
        arr = getattr(params, name)
        arr += 0.2 * rng.standard_normal(arr.shape)
    return params, stats


def _check_mask(rng, shape):
    errs = []
    for conditional in (False, True):
        params, stats = _mask_setup(rng, shape, conditional)
        x = rng.standard_normal(shape)
        cond = rng.integers(0, 3, shape[0]) if conditional else None
        r = _probe(rng, (shape[0], shape[1], shape[2],
                         params.mask_channels))

        def loss():
            m, _, _ = spn.build_self_latent_mask(x, params, stats.mask,
                                                 train=True, cond=cond)
            return float((m * r).sum())

        m, _, cache = spn.build_self_latent_mask(x, params, stats.mask,
                                                 train=True, cond=cond)
        dx, grads = spn.build_self_latent_mask_backward(cache, r)
        errs.append(rel_err(dx, fd_gradient(loss, x)))
        for name in ("proj_w", "proj_b", "norm_scale", "norm_shift"):
            errs.append(rel_err(grads[name],
                                fd_gradient(loss, getattr(params, name))))
    return max(errs)


def _check_affine_field(rng, shape, standard_conv=False, single_channel=False,
                        conditional=False):
    c = shape[3]
    params, _ = spn.init_spn_params(
        c, kernel_size=3, rng=rng,
        mask_channels=1 if single_channel else None,
        standard_conv=standard_conv,
        num_classes=3 if conditional else 0,
        emb_dim=4 if conditional else 0,
        z_dim=5 if conditional else 0, dtype=np.float64)
    for name in params.field_names():
        arr = getattr(params, name)
        arr += 0.2 * rng.standard_normal(arr.shape)
    cm = params.mask_channels
    logits = rng.standard_normal((shape[0], shape[1], shape[2], cm))
    m = spn.sigmoid(logits)
    cond = rng.integers(0, 3, shape[0]) if conditional else None
    z = rng.standard_normal((shape[0], 5)) if conditional else None
    rg = _probe(rng, shape)
    rb = _probe(rng, shape)

    def loss():
        minv = spn.invert_mask(m)
        gamma, beta, _ = spn.estimate_affine_field(m, minv, params,
                                                   cond=cond, z=z)
        return float((gamma * rg).sum() + (beta * rb).sum())

    minv = spn.invert_mask(m)
    gamma, beta, cache = spn.estimate_affine_field(m, minv, params,
                                                   cond=cond, z=z)
    dm, dminv, grads, dz = spn.estimate_affine_field_backward(cache, rg, rb)
    errs = []
    # total mask derivative: complement contributes with opposite sign
    dm_total = dm - dminv
    errs.append(rel_err(dm_total, fd_gradient(loss, m)))
    for name, g in grads.items():
        errs.append(rel_err(g, fd_gradient(loss, getattr(params, name))))
    if conditional and params.latent_bias_w is not None:
        errs.append(rel_err(dz, fd_gradient(loss, z)))
    return max(errs)


def _check_spn_composite(rng, shape, conditional=False, train=True):
    c = shape[3]
    params, stats = _mask_setup(rng, shape, conditional)
    x = rng.standard_normal(shape)
    cond = rng.integers(0, 3, shape[0]) if conditional else None
    z = rng.standard_normal((shape[0], 5)) if conditional else None
    r = _probe(rng, shape)
    if not train:
        # accumulate statistics once, then check the eval path
        _, stats, _ = spn.spn_forward(x, params, stats, train=True,
                                      cond=cond, z=z)

    def loss():
        y, _, _ = spn.spn_forward(x, params, stats, train=train,
                                  cond=cond, z=z)
        return float((y * r).sum())

    y, _, cache = spn.spn_forward(x, params, stats, train=train,
                                  cond=cond, z=z)
    dx, grads, dz = spn.spn_backward(cache, r)
    errs = [rel_err(dx, fd_gradient(loss, x))]
    for name in params.field_names():
        errs.append(rel_err(grads[name], fd_gradient(loss, getattr(params, name))))
    if conditional:
        errs.append(rel_err(dz, fd_gradient(loss, z)))
    return max(errs)


def run_spn_gradcheck(shape=(2, 8, 8, 4), seed=0):
    """Forward/backward consistency suite. Returns list of (name, max_rel_err)."""
    shape = tuple(shape)
    results = []
    jobs = [
        ("channelwise_normalize", lambda r: _check_normalize(r, shape)),
        ("build_self_latent_mask", lambda r: _check_mask(r, shape)),
        ("estimate_affine_field", lambda r: _check_affine_field(r, shape)),
        ("estimate_affine_field/standard_conv",
         lambda r: _check_affine_field(r, shape, standard_conv=True)),
        ("estimate_affine_field/single_channel",
         lambda r: _check_affine_field(r, shape, single_channel=True)),
        ("estimate_affine_field/conditional",
         lambda r: _check_affine_field(r, shape, conditional=True)),
        ("spn_forward", lambda r: _check_spn_composite(r, shape)),
        ("spn_forward/eval",
         lambda r: _check_spn_composite(r, shape, train=False)),
        ("cspn_forward",
         lambda r: _check_spn_composite(r, shape, conditional=True)),
    ]
    for i, (name, job) in enumerate(jobs):
        rng = np.random.default_rng(seed + 1000 * i)
        t0 = time.perf_counter()
        err = job(rng)
        results.append((name, err, time.perf_counter() - t0))
    return results

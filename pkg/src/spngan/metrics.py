"""Evaluation: FID and IS over pluggable feature extractors, plus grids
visualizing the self-generated masks.

FID compares Gaussian fits of feature distributions, so absolute values are
only comparable when computed with the same extractor. A small deterministic
random-projection extractor is bundled so the full pipeline runs without any
pretrained weights.
"""

from dataclasses import dataclass

import numpy as np

from .data import bilinear_resize, from_model_range, save_image_grid, to_model_range


@dataclass
class GaussianSummary:
    mean: np.ndarray       # (F,)
    cov: np.ndarray        # (F, F) symmetric PSD
    count: int


def summarize_features(features):
    """Sample mean and unbiased (ddof=1) covariance of an (N, F) matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("need an (N >= 2, F) feature matrix")
    mean = features.mean(axis=0)
    cov = np.cov(features, rowvar=False, ddof=1)
    return GaussianSummary(mean, np.atleast_2d(cov), features.shape[0])


def _psd_eigvals(sym, what):
    """Eigenvalues of a symmetric matrix, small negatives clamped to zero.

    Anything below -1e-6 (relative to the largest eigenvalue) means the
    input was not a covariance matrix and is reported, not papered over."""
    vals, vecs = np.linalg.eigh(sym)
    tol = 1e-6 * max(1.0, float(vals[-1]))
    if vals[0] < -tol:
        raise ValueError("%s is not PSD: eigenvalue %g" % (what, vals[0]))
    return np.maximum(vals, 0.0), vecs


def _sqrtm_psd(sym, what):
    vals, vecs = _psd_eigvals(0.5 * (sym + sym.T), what)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a, b):
    """Wasserstein-2 squared between two Gaussian summaries:
    ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)).

    The cross term uses Tr((S Sb S)^(1/2)) with S = Sa^(1/2), which is
    symmetric PSD, so a plain eigendecomposition suffices."""
    diff = a.mean - b.mean
    s = _sqrtm_psd(a.cov, "covariance a")
    inner = s @ b.cov @ s
    vals, _ = _psd_eigvals(0.5 * (inner + inner.T), "cross covariance")
    fid = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov)
                - 2.0 * np.sqrt(vals).sum())
    return max(fid, 0.0)


def inception_score(probs, splits=10):
    """exp(E_x KL(p(y|x) || p(y))) per split; returns (mean, std) over splits.

    Zero entries contribute zero to the KL sum; wherever p(y|x) > 0 the split
    marginal is positive too, so the logs are well defined."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("probs must be (N, K)")
    if probs.min() < -1e-6 or np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("rows must lie on the probability simplex")
    n = probs.shape[0]
    if not 1 <= splits <= n:
        raise ValueError("splits must lie in [1, N]")
    scores = []
    for part in np.array_split(np.arange(n), splits):
        p = probs[part]
        marginal = p.mean(axis=0)
        safe_p = np.maximum(p, 1e-300)
        safe_m = np.maximum(marginal, 1e-300)
        kl = np.where(p > 0, p * (np.log(safe_p) - np.log(safe_m)), 0.0).sum(axis=1)
        scores.append(np.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


class ToyExtractor:
    """Deterministic stand-in for a pretrained feature network.

    A fixed random projection with a relu provides features; a second fixed
    projection with softmax provides class probabilities. Useful for
    exercising the metric pipeline, not for quoting comparable scores."""

    def __init__(self, input_size=32, feature_dim=64, num_classes=10, seed=0):
        rng = np.random.default_rng(seed)
        d = input_size * input_size * 3
        self.input_size = input_size
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.w1 = rng.standard_normal((d, feature_dim)) / np.sqrt(d)
        self.b1 = 0.1 * rng.standard_normal(feature_dim)
        self.w2 = rng.standard_normal((feature_dim, num_classes)) / np.sqrt(feature_dim)

    def __call__(self, images_u8):
        """(N, H, W, 3) uint8 -> (features (N, F), probs (N, K))."""
        imgs = images_u8
        if imgs.shape[1] != self.input_size or imgs.shape[2] != self.input_size:
            imgs = np.stack([
                np.clip(np.rint(bilinear_resize(im.astype(np.float64),
                                                self.input_size,
                                                self.input_size)), 0, 255)
                for im in imgs]).astype(np.uint8)
        x = to_model_range(imgs).reshape(imgs.shape[0], -1).astype(np.float64)
        feats = np.maximum(x @ self.w1 + self.b1, 0.0)
        logits = feats @ self.w2
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return feats, e / e.sum(axis=1, keepdims=True)


def _extract(extractor, images_u8, batch):
    feats, probs = [], []
    for i in range(0, images_u8.shape[0], batch):
        f, p = extractor(images_u8[i:i + batch])
        feats.append(f)
        probs.append(p)
    return np.concatenate(feats), np.concatenate(probs)


def evaluate_model(gen, extractor, real_images_u8, n_samples=50000,
                   batch=100, seed=0, splits=10):
    """Generate n_samples eval-mode images and score them against real ones.

    Deterministic given seed: the latent draws, label draws, and the real
    subset all come from one seeded stream. Returns (fid, is_mean, is_std)."""
    rng = np.random.default_rng(seed)
    n_real = real_images_u8.shape[0]
    take = min(n_samples, n_real)
    idx = rng.choice(n_real, size=take, replace=False)
    real_feats, _ = _extract(extractor, real_images_u8[idx], batch)

    feats, probs = [], []
    done = 0
    while done < n_samples:
        b = min(batch, n_samples - done)
        z = rng.standard_normal((b, gen.spec.z_dim)).astype(gen.spec.dtype)
        cond = (rng.integers(0, gen.spec.num_classes, b)
                if gen.conditional else None)
        imgs = from_model_range(gen.forward(z, cond=cond, train=False))
        f, p = extractor(imgs)
        feats.append(f)
        probs.append(p)
        done += b
    fake_feats = np.concatenate(feats)
    fake_probs = np.concatenate(probs)

    fid = frechet_distance(summarize_features(real_feats),
                           summarize_features(fake_feats))
    is_mean, is_std = inception_score(fake_probs, splits=splits)
    return fid, is_mean, is_std


def mask_spatial_variance(masks):
    """Mean over (sample, channel) of the per-map spatial variance.

    A collapsed mask (spatially constant) scores 0; anything spatially
    structured scores well above float noise."""
    masks = np.asarray(masks)
    return float(masks.var(axis=(1, 2)).mean())


def collect_masks(gen, z, cond=None, train=False, layer_index=-1):
    """Forward once with mask capture on; returns the chosen layer's mask."""
    if not gen.spn_layers:
        raise ValueError("generator has no pixel-adaptive layers")
    gen.set_mask_capture(True)
    try:
        gen.forward(z, cond=cond, train=train)
        mask = gen.spn_layers[layer_index].last_mask
    finally:
        gen.set_mask_capture(False)
    return mask


def visualize_masks(gen, z, path, cond=None, layer_index=-1, channels=(0, 1, 2, 3),
                    train=False):
    """Export a grayscale grid of masks from one layer: for each requested
    channel, a row of m tiles (one per batch sample) followed by a row of
    m* = 1 - m tiles. Checks m + m* == 1 exactly before quantization."""
    mask = collect_masks(gen, z, cond=cond, train=train, layer_index=layer_index)
    b, h, w, c = mask.shape
    channels = [ch for ch in channels if ch < c]
    if not channels:
        raise ValueError("no valid channel indices for a %d-channel mask" % c)
    inv = 1.0 - mask
    if not np.array_equal(mask + inv, np.ones_like(mask)):
        raise AssertionError("mask and its inverse do not sum to one")
    tiles = []
    for ch in channels:
        for plane in (mask, inv):
            tiles.extend(plane[i, :, :, ch] for i in range(b))
    grid = np.clip(np.rint(np.stack(tiles) * 255.0), 0, 255).astype(np.uint8)
    grid = np.repeat(grid[..., None], 3, axis=3)
    save_image_grid(grid, path, cols=b)
    return mask[:, :, :, channels]

"""Residual GAN models and their parameter/MAC audit.

Generator (32px): dense to 4x4, three up-blocks at constant width, final
affine norm + ReLU + 3x3 conv + tanh. Generator (128px): dense to 4x4, five
up-blocks halving width from 8x base, pixel-adaptive norm only in the last
three blocks. In-block baseline norms are affine-free channel normalization;
the self pixel-wise layers carry their own learnable pair inside the mask
branch. Discriminator: standard pre-activation residual stack with spectral
norm everywhere, global sum pooling, linear head, optional class projection.

Audit convention: one MAC per multiply-accumulate; normalization costs two
MACs per element (normalize + affine), the pixel-adaptive modulation one MAC
per element; pure adds, pooling, activations and embedding lookups are free.
count_flops scales MACs by 1 or 2 per the chosen convention.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .layers import (AvgPool2x2, BatchNorm, ConditionalBatchNorm, Conv2d,
                     Dense, Embedding, GlobalSumPool, Layer, ReLU,
                     SelfPixelNorm, SpatialAttention, Tanh, UpsampleNearest2x)

NORM_KINDS = ("bn", "cbn", "ccbn", "spn", "cspn")
CONDITIONAL_NORMS = ("cbn", "ccbn", "cspn")


@dataclass
class SpnOptions:
    kernel_size: int = 3
    single_channel_mask: bool = False
    standard_conv: bool = False
    latent_bias: bool = True


@dataclass
class GeneratorSpec:
    resolution: int = 32
    norm: str = "spn"
    base_width: int = 0          # 0 = table default (256 at 32px, 64 at 128px)
    z_dim: int = 128
    num_classes: int = 0
    emb_dim: int = 128
    spn: SpnOptions = field(default_factory=SpnOptions)
    spatial_attention: bool = False
    sn: bool = False             # spectral norm on generator weights (128px regime)
    dtype: type = np.float32

    def widths(self):
        if self.resolution == 32:
            w = self.base_width or 256
            return [w, w, w]
        if self.resolution == 128:
            b = self.base_width or 64
            return [8 * b, 8 * b, 4 * b, 2 * b, b]
        raise ValueError("resolution must be 32 or 128, got %r" % self.resolution)

    def adaptive_sites(self):
        """Which blocks use the pixel-adaptive norm (when norm is spn/cspn)."""
        if self.norm not in ("spn", "cspn"):
            return [False] * len(self.widths())
        if self.resolution == 32:
            return [True, True, True]
        return [False, False, True, True, True]


@dataclass
class DiscriminatorSpec:
    resolution: int = 32
    base_width: int = 0          # 0 = table default (128 at 32px, 64 at 128px)
    num_classes: int = 0
    dtype: type = np.float32

    def widths(self):
        if self.resolution == 32:
            w = self.base_width or 128
            return [w, w, w, w]
        if self.resolution == 128:
            b = self.base_width or 64
            return [b, 2 * b, 4 * b, 8 * b, 8 * b, 8 * b]
        raise ValueError("resolution must be 32 or 128, got %r" % self.resolution)


def _make_norm(spec, c, adaptive, rng):
    kind = spec.norm
    if adaptive:
        o = spec.spn
        conditional = kind == "cspn"
        return SelfPixelNorm(
            c, rng, kernel_size=o.kernel_size,
            mask_channels=1 if o.single_channel_mask else None,
            standard_conv=o.standard_conv,
            num_classes=spec.num_classes if conditional else 0,
            emb_dim=spec.emb_dim if conditional else 0,
            z_dim=spec.z_dim if conditional else 0,
            latent_bias=o.latent_bias, sn_proj=spec.sn, dtype=spec.dtype)
    if kind in ("bn", "spn"):
        return BatchNorm(c, affine=False, dtype=spec.dtype)
    if kind in ("cbn", "ccbn", "cspn"):
        return ConditionalBatchNorm(
            c, spec.num_classes,
            z_dim=spec.z_dim if kind == "ccbn" else 0, dtype=spec.dtype)
    raise ValueError("unknown norm kind %r" % kind)


class GenBlock(Layer):
    def __init__(self, spec, cin, cout, adaptive, rng):
        super().__init__()
        dtype = spec.dtype
        self.n1 = self.child("n1", _make_norm(spec, cin, adaptive, rng))
        self.r1 = self.child("r1", ReLU())
        self.up = self.child("up", UpsampleNearest2x())
        self.c1 = self.child("c1", Conv2d(3, cin, cout, rng, sn=spec.sn,
                                          gain=math.sqrt(2), dtype=dtype))
        self.n2 = self.child("n2", _make_norm(spec, cout, adaptive, rng))
        self.r2 = self.child("r2", ReLU())
        self.c2 = self.child("c2", Conv2d(3, cout, cout, rng, sn=spec.sn,
                                          gain=math.sqrt(2), dtype=dtype))
        self.sa = self.child("sa", SpatialAttention(rng, dtype=dtype)) \
            if spec.spatial_attention else None
        self.up_sc = self.child("up_sc", UpsampleNearest2x())
        self.sc = self.child("sc", Conv2d(1, cin, cout, rng, sn=spec.sn,
                                          dtype=dtype)) if cin != cout else None

    def forward(self, x, train=True, cond=None, z=None):
        h = self.n1.forward(x, train, cond, z)
        h = self.r1.forward(h, train)
        h = self.up.forward(h, train)
        h = self.c1.forward(h, train)
        h = self.n2.forward(h, train, cond, z)
        h = self.r2.forward(h, train)
        h = self.c2.forward(h, train)
        if self.sa is not None:
            h = self.sa.forward(h, train)
        s = self.up_sc.forward(x, train)
        if self.sc is not None:
            s = self.sc.forward(s, train)
        return h + s

    def backward(self, dy):
        d = dy
        if self.sa is not None:
            d = self.sa.backward(d)
        d = self.c2.backward(d)
        d = self.r2.backward(d)
        d = self.n2.backward(d)
        d = self.c1.backward(d)
        d = self.up.backward(d)
        d = self.r1.backward(d)
        d = self.n1.backward(d)
        ds = dy
        if self.sc is not None:
            ds = self.sc.backward(ds)
        ds = self.up_sc.backward(ds)
        return d + ds

    def audit(self, prefix, hw):
        rows = []
        h2 = hw * 4
        rows.append((prefix + "n1", self.n1.param_count(),
                     _norm_macs(self.n1, hw)))
        rows.append((prefix + "c1", self.c1.param_count(),
                     9 * self.c1.cin * self.c1.cout * h2))
        rows.append((prefix + "n2", self.n2.param_count(),
                     _norm_macs(self.n2, h2)))
        rows.append((prefix + "c2", self.c2.param_count(),
                     9 * self.c2.cin * self.c2.cout * h2))
        if self.sa is not None:
            conv = self.sa.conv
            rows.append((prefix + "sa", self.sa.param_count(),
                         conv.k * conv.k * 2 * h2 + self.c2.cout * h2))
        if self.sc is not None:
            rows.append((prefix + "sc", self.sc.param_count(),
                         self.sc.cin * self.sc.cout * h2))
        return rows, h2


def _norm_macs(layer, hw):
    """Per-element audit of one norm site at hw spatial positions."""
    if isinstance(layer, BatchNorm):
        return 2 * layer.stats.mean.shape[0] * hw
    if isinstance(layer, ConditionalBatchNorm):
        c = layer.stats.mean.shape[0]
        macs = 2 * c * hw
        if layer.z_dim:
            macs += 2 * layer.z_dim * c
        return macs
    if isinstance(layer, SelfPixelNorm):
        p = layer._template
        c = p.proj_w.shape[2]
        cm = p.mask_channels
        k = p.kernel_size
        macs = c * cm * hw            # 1x1 mask projection
        macs += 2 * cm * hw           # mask branch norm + affine
        if p.standard_conv:
            macs += 4 * k * k * cm * c * hw
        else:
            macs += 4 * k * k * c * hw
        macs += c * hw                # per-pixel modulation of normalized input
        macs += 2 * c * hw            # main channel normalization
        if p.conditional:
            e = p.class_emb.shape[1]
            macs += e * 4 * c + 4 * c * hw   # kernel modulation map + apply
            if p.latent_bias_w is not None:
                macs += p.latent_bias_w.shape[0] * 2 * c
        return macs
    raise TypeError("unknown norm layer %r" % type(layer))


class Generator(Layer):
    def __init__(self, spec, rng):
        super().__init__()
        if spec.norm not in NORM_KINDS:
            raise ValueError("unknown norm kind %r" % spec.norm)
        if spec.norm in CONDITIONAL_NORMS and spec.num_classes < 1:
            raise ValueError("norm %r requires num_classes >= 1" % spec.norm)
        self.spec = spec
        widths = spec.widths()
        self.dense = self.child("dense", Dense(
            spec.z_dim, 4 * 4 * widths[0], rng, sn=spec.sn, dtype=spec.dtype))
        self.blocks = []
        cin = widths[0]
        for i, (cout, adaptive) in enumerate(zip(widths, spec.adaptive_sites())):
            blk = self.child("block%d" % (i + 1),
                             GenBlock(spec, cin, cout, adaptive, rng))
            self.blocks.append(blk)
            cin = cout
        self.final_norm = self.child("final_norm",
                                     BatchNorm(cin, affine=True, dtype=spec.dtype))
        self.final_relu = self.child("final_relu", ReLU())
        self.final_conv = self.child("final_conv", Conv2d(
            3, cin, 3, rng, sn=spec.sn, dtype=spec.dtype))
        self.tanh = self.child("tanh", Tanh())
        self.norm_layers = [l for blk in self.blocks for l in (blk.n1, blk.n2)]
        self.spn_layers = [l for l in self.norm_layers
                           if isinstance(l, SelfPixelNorm)]
        self.conditional = spec.norm in CONDITIONAL_NORMS

    def forward(self, z, cond=None, train=True):
        if self.conditional and cond is None:
            raise ValueError("conditional generator requires cond labels")
        if not self.conditional and cond is not None:
            raise ValueError("cond labels passed to an unconditional generator")
        b = z.shape[0]
        w0 = self.spec.widths()[0]
        h = self.dense.forward(z, train).reshape(b, 4, 4, w0)
        for blk in self.blocks:
            h = blk.forward(h, train, cond, z)
        h = self.final_norm.forward(h, train)
        h = self.final_relu.forward(h, train)
        h = self.final_conv.forward(h, train)
        return self.tanh.forward(h, train)

    def backward(self, dimg):
        d = self.tanh.backward(dimg)
        d = self.final_conv.backward(d)
        d = self.final_relu.backward(d)
        d = self.final_norm.backward(d)
        for blk in reversed(self.blocks):
            d = blk.backward(d)
        dz = self.dense.backward(d.reshape(d.shape[0], -1))
        for layer in self.norm_layers:
            extra = getattr(layer, "last_dz", None)
            if extra is not None:
                dz = dz + extra
        return dz

    def set_mask_capture(self, on):
        for l in self.spn_layers:
            l.capture_mask = on
            if not on:
                l.last_mask = None

    def audit(self):
        rows = [("dense", self.dense.param_count(),
                 self.spec.z_dim * 4 * 4 * self.spec.widths()[0])]
        hw = 16
        for i, blk in enumerate(self.blocks):
            brows, hw = blk.audit("block%d/" % (i + 1), hw)
            rows.extend(brows)
        c = self.final_norm.stats.mean.shape[0]
        rows.append(("final_norm", self.final_norm.param_count(), 2 * c * hw))
        rows.append(("final_conv", self.final_conv.param_count(), 9 * c * 3 * hw))
        return rows


class DiscOptBlock(Layer):
    """Input block: conv/relu/conv/pool with a pool-then-1x1 shortcut."""

    def __init__(self, cout, rng, dtype):
        super().__init__()
        self.c1 = self.child("c1", Conv2d(3, 3, cout, rng, sn=True,
                                          gain=math.sqrt(2), dtype=dtype))
        self.r1 = self.child("r1", ReLU())
        self.c2 = self.child("c2", Conv2d(3, cout, cout, rng, sn=True,
                                          gain=math.sqrt(2), dtype=dtype))
        self.pool = self.child("pool", AvgPool2x2())
        self.sc_pool = self.child("sc_pool", AvgPool2x2())
        self.sc = self.child("sc", Conv2d(1, 3, cout, rng, sn=True, dtype=dtype))

    def forward(self, x, train=True):
        h = self.c1.forward(x, train)
        h = self.r1.forward(h, train)
        h = self.c2.forward(h, train)
        h = self.pool.forward(h, train)
        s = self.sc.forward(self.sc_pool.forward(x, train), train)
        return h + s

    def backward(self, dy):
        d = self.pool.backward(dy)
        d = self.c2.backward(d)
        d = self.r1.backward(d)
        d = self.c1.backward(d)
        ds = self.sc_pool.backward(self.sc.backward(dy))
        return d + ds

    def audit(self, prefix, hw):
        rows = [
            (prefix + "c1", self.c1.param_count(), 9 * 3 * self.c1.cout * hw),
            (prefix + "c2", self.c2.param_count(),
             9 * self.c2.cin * self.c2.cout * hw),
            (prefix + "sc", self.sc.param_count(),
             3 * self.sc.cout * (hw // 4)),
        ]
        return rows, hw // 4


class DiscBlock(Layer):
    def __init__(self, cin, cout, down, rng, dtype):
        super().__init__()
        self.down = down
        self.r1 = self.child("r1", ReLU())
        self.c1 = self.child("c1", Conv2d(3, cin, cout, rng, sn=True,
                                          gain=math.sqrt(2), dtype=dtype))
        self.r2 = self.child("r2", ReLU())
        self.c2 = self.child("c2", Conv2d(3, cout, cout, rng, sn=True,
                                          gain=math.sqrt(2), dtype=dtype))
        if down:
            self.pool = self.child("pool", AvgPool2x2())
            self.sc_pool = self.child("sc_pool", AvgPool2x2())
        self.learnable_sc = cin != cout or down
        if self.learnable_sc:
            self.sc = self.child("sc", Conv2d(1, cin, cout, rng, sn=True,
                                              dtype=dtype))

    def forward(self, x, train=True):
        h = self.r1.forward(x, train)
        h = self.c1.forward(h, train)
        h = self.r2.forward(h, train)
        h = self.c2.forward(h, train)
        if self.down:
            h = self.pool.forward(h, train)
        s = x
        if self.learnable_sc:
            s = self.sc.forward(s, train)
        if self.down:
            s = self.sc_pool.forward(s, train)
        return h + s

    def backward(self, dy):
        d = dy
        if self.down:
            d = self.pool.backward(d)
        d = self.c2.backward(d)
        d = self.r2.backward(d)
        d = self.c1.backward(d)
        d = self.r1.backward(d)
        ds = dy
        if self.down:
            ds = self.sc_pool.backward(ds)
        if self.learnable_sc:
            ds = self.sc.backward(ds)
        return d + ds

    def audit(self, prefix, hw):
        rows = [
            (prefix + "c1", self.c1.param_count(),
             9 * self.c1.cin * self.c1.cout * hw),
            (prefix + "c2", self.c2.param_count(),
             9 * self.c2.cin * self.c2.cout * hw),
        ]
        if self.learnable_sc:
            rows.append((prefix + "sc", self.sc.param_count(),
                         self.sc.cin * self.sc.cout * hw))
        return rows, hw // 4 if self.down else hw


class Discriminator(Layer):
    def __init__(self, spec, rng):
        super().__init__()
        self.spec = spec
        widths = spec.widths()
        dtype = spec.dtype
        self.blocks = [self.child("block1", DiscOptBlock(widths[0], rng, dtype))]
        if spec.resolution == 32:
            downs = [True, False, False]
        else:
            downs = [True, True, True, True, False]
        for i, (cout, down) in enumerate(zip(widths[1:], downs)):
            self.blocks.append(self.child(
                "block%d" % (i + 2),
                DiscBlock(widths[i], cout, down, rng, dtype)))
        self.final_relu = self.child("final_relu", ReLU())
        self.gsp = self.child("gsp", GlobalSumPool())
        self.head = self.child("head", Dense(widths[-1], 1, rng, sn=True,
                                             dtype=dtype))
        self.proj = self.child("proj", Embedding(
            spec.num_classes, widths[-1], rng, sn=True, dtype=dtype)) \
            if spec.num_classes else None

    def forward(self, x, cond=None, train=True):
        if self.proj is not None and cond is None:
            raise ValueError("projection discriminator requires cond labels")
        h = x
        for blk in self.blocks:
            h = blk.forward(h, train)
        h = self.final_relu.forward(h, train)
        feat = self.gsp.forward(h, train)
        logit = self.head.forward(feat, train)[:, 0]
        if self.proj is not None:
            emb = self.proj.forward(cond, train)
            self._proj_cache = (feat, emb)
            logit = logit + (feat * emb).sum(axis=1)
        return logit

    def backward(self, dlogit):
        dfeat = self.head.backward(dlogit[:, None])
        if self.proj is not None:
            feat, emb = self._proj_cache
            self.proj.backward(dlogit[:, None] * feat)
            dfeat = dfeat + dlogit[:, None] * emb
        d = self.gsp.backward(dfeat)
        d = self.final_relu.backward(d)
        for blk in reversed(self.blocks):
            d = blk.backward(d)
        return d

    def audit(self):
        rows = []
        hw = self.spec.resolution ** 2
        for i, blk in enumerate(self.blocks):
            brows, hw = blk.audit("block%d/" % (i + 1), hw)
            rows.extend(brows)
        w = self.spec.widths()[-1]
        rows.append(("head", self.head.param_count(), w))
        if self.proj is not None:
            rows.append(("proj", self.proj.param_count(), w))
        return rows


def count_parameters(model):
    """Exact learnable scalar count (buffers excluded)."""
    return model.param_count()


def count_macs(model):
    return sum(m for _, _, m in model.audit())


def count_flops(model, convention="mac2"):
    """Total FLOPs under 'mac1' (1 FLOP per MAC) or 'mac2' (2 FLOPs per MAC)."""
    if convention not in ("mac1", "mac2"):
        raise ValueError("convention must be 'mac1' or 'mac2'")
    return count_macs(model) * (1 if convention == "mac1" else 2)


def audit_table(model, title):
    """Plain-text layer table plus key=value lines for machine parsing."""
    rows = model.audit()
    total_p = count_parameters(model)
    total_m = count_macs(model)
    lines = ["%s" % title,
             "%-24s %12s %16s" % ("layer", "params", "macs")]
    for name, p, m in rows:
        lines.append("%-24s %12d %16d" % (name, p, m))
    lines.append("%-24s %12d %16d" % ("total", total_p, total_m))
    kv = {"params": total_p, "macs": total_m,
          "flops_mac1": total_m, "flops_mac2": 2 * total_m,
          "rows": rows}
    return "\n".join(lines), kv

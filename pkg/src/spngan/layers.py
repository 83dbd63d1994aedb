"""Stateful layers over the functional ops.

Each layer keeps explicit Parameter objects, stores its forward cache on
itself, and accumulates gradients into Parameter.grad on backward. Norm
layers share the signature forward(x, train, cond, z) so blocks can treat
them uniformly; unconditional layers ignore what they do not use.
"""

import numpy as np

from . import backend, spn
from .spectral import SpectralNorm


class Parameter:
    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data)
        self.grad = np.zeros_like(self.data)


class Layer:
    def __init__(self):
        self._params = {}
        self._children = {}

    def param(self, name, data):
        p = Parameter(data)
        self._params[name] = p
        return p

    def child(self, name, layer):
        self._children[name] = layer
        return layer

    def named_parameters(self, prefix=""):
        out = []
        for name, p in self._params.items():
            out.append((prefix + name, p))
        for cname, c in self._children.items():
            out.extend(c.named_parameters(prefix + cname + "/"))
        return out

    def _local_buffers(self):
        return {}

    def _load_local_buffers(self, bufs):
        pass

    def named_buffers(self, prefix=""):
        out = []
        for name, arr in self._local_buffers().items():
            out.append((prefix + name, arr))
        for cname, c in self._children.items():
            out.extend(c.named_buffers(prefix + cname + "/"))
        return out

    def load_buffers(self, flat, prefix=""):
        local = {}
        for name in self._local_buffers():
            key = prefix + name
            if key not in flat:
                raise KeyError("checkpoint is missing buffer %r" % key)
            local[name] = flat[key]
        if local:
            self._load_local_buffers(local)
        for cname, c in self._children.items():
            c.load_buffers(flat, prefix + cname + "/")

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad[...] = 0.0

    def param_count(self):
        return sum(p.data.size for _, p in self.named_parameters())


def glorot_uniform(shape, fan_in, fan_out, rng, gain, dtype):
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype)


def _stats_buffers(tag, stats):
    return {
        tag + "mean": stats.mean,
        tag + "var": stats.var,
        tag + "initialized": np.array([1 if stats.initialized else 0], np.uint8),
    }


def _stats_from_buffers(tag, stats, bufs):
    import dataclasses
    return dataclasses.replace(
        stats,
        mean=bufs[tag + "mean"].astype(stats.mean.dtype),
        var=bufs[tag + "var"].astype(stats.var.dtype),
        initialized=bool(bufs[tag + "initialized"][0]))


class Dense(Layer):
    def __init__(self, in_dim, out_dim, rng, bias=True, sn=False, gain=1.0,
                 dtype=np.float32):
        super().__init__()
        self.w = self.param("w", glorot_uniform((in_dim, out_dim), in_dim,
                                                out_dim, rng, gain, dtype))
        self.b = self.param("b", np.zeros(out_dim, dtype=dtype)) if bias else None
        self.sn = SpectralNorm(out_dim, rng, dtype=dtype) if sn else None

    def forward(self, x, train=True):
        w = self.w.data
        if self.sn is not None:
            wbar2, self._sn_cache = self.sn.normalize(w.T, train)
            w = wbar2.T
        self._cache = (x, w)
        y = x @ w
        if self.b is not None:
            y = y + self.b.data
        return y

    def backward(self, dy):
        x, w = self._cache
        dw = x.T @ dy
        if self.b is not None:
            self.b.grad += dy.sum(axis=0)
        if self.sn is not None:
            dw = self.sn.backward(dw.T, self._sn_cache).T
        self.w.grad += dw
        return dy @ w.T

    def _local_buffers(self):
        return {"sn_u": self.sn.u} if self.sn is not None else {}

    def _load_local_buffers(self, bufs):
        self.sn.u = bufs["sn_u"].astype(self.sn.u.dtype)


class Conv2d(Layer):
    """3x3/1x1 style same-padding convolution, layout (k, k, Cin, Cout)."""

    def __init__(self, k, cin, cout, rng, bias=True, sn=False, gain=1.0,
                 dtype=np.float32):
        super().__init__()
        self.k, self.cin, self.cout = k, cin, cout
        fan_in, fan_out = k * k * cin, k * k * cout
        self.w = self.param("w", glorot_uniform((k, k, cin, cout), fan_in,
                                                fan_out, rng, gain, dtype))
        self.b = self.param("b", np.zeros(cout, dtype=dtype)) if bias else None
        self.sn = SpectralNorm(cout, rng, dtype=dtype) if sn else None

    def _to_matrix(self, w):
        return w.transpose(3, 0, 1, 2).reshape(self.cout, -1)

    def _from_matrix(self, m):
        return m.reshape(self.cout, self.k, self.k, self.cin).transpose(1, 2, 3, 0)

    def forward(self, x, train=True):
        w = self.w.data
        if self.sn is not None:
            wbar2, self._sn_cache = self.sn.normalize(self._to_matrix(w), train)
            w = np.ascontiguousarray(self._from_matrix(wbar2))
        self._cache = (x, w)
        y = backend.conv2d_forward(x, w)
        if self.b is not None:
            y = y + self.b.data
        return y

    def backward(self, dy):
        x, w = self._cache
        dw = backend.conv2d_kernel_grad(x, dy, self.k)
        if self.b is not None:
            self.b.grad += dy.sum(axis=(0, 1, 2))
        if self.sn is not None:
            dw = self._from_matrix(self.sn.backward(self._to_matrix(dw),
                                                    self._sn_cache))
        self.w.grad += dw
        return backend.conv2d_input_grad(dy, w)

    def _local_buffers(self):
        return {"sn_u": self.sn.u} if self.sn is not None else {}

    def _load_local_buffers(self, bufs):
        self.sn.u = bufs["sn_u"].astype(self.sn.u.dtype)


class Embedding(Layer):
    def __init__(self, num_classes, dim, rng, sn=False, scale=0.02,
                 dtype=np.float32):
        super().__init__()
        self.table = self.param(
            "table", (scale * rng.standard_normal((num_classes, dim))).astype(dtype))
        self.sn = SpectralNorm(num_classes, rng, dtype=dtype) if sn else None

    def forward(self, idx, train=True):
        t = self.table.data
        if self.sn is not None:
            t, self._sn_cache = self.sn.normalize(t, train)
        self._cache = (idx, t.shape)
        return t[idx]

    def backward(self, drows):
        idx, shape = self._cache
        dt = np.zeros(shape, dtype=drows.dtype)
        np.add.at(dt, idx, drows)
        if self.sn is not None:
            dt = self.sn.backward(dt, self._sn_cache)
        self.table.grad += dt
        return None

    def _local_buffers(self):
        return {"sn_u": self.sn.u} if self.sn is not None else {}

    def _load_local_buffers(self, bufs):
        self.sn.u = bufs["sn_u"].astype(self.sn.u.dtype)


class BatchNorm(Layer):
    """Channel normalization with an optional learnable affine pair."""

    def __init__(self, c, affine=True, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.stats = spn.make_stats(c, momentum, eps, dtype)
        self.affine = affine
        if affine:
            self.scale = self.param("scale", np.ones(c, dtype=dtype))
            self.shift = self.param("shift", np.zeros(c, dtype=dtype))

    def forward(self, x, train=True, cond=None, z=None):
        xhat, self.stats, self._ncache = spn.channelwise_normalize(
            x, self.stats, train)
        if not self.affine:
            return xhat
        self._xhat = xhat
        return xhat * self.scale.data + self.shift.data

    def backward(self, dy):
        if self.affine:
            self.scale.grad += (dy * self._xhat).sum(axis=(0, 1, 2))
            self.shift.grad += dy.sum(axis=(0, 1, 2))
            dy = dy * self.scale.data
        return spn.channelwise_normalize_backward(self._ncache, dy)

    def _local_buffers(self):
        return _stats_buffers("", self.stats)

    def _load_local_buffers(self, bufs):
        self.stats = _stats_from_buffers("", self.stats, bufs)


class ConditionalBatchNorm(Layer):
    """Per-class affine over shared batch statistics; optional latent bias
    variant adds zero-init projections of z to both scale and shift."""

    def __init__(self, c, num_classes, z_dim=0, momentum=0.9, eps=1e-5,
                 dtype=np.float32):
        super().__init__()
        self.stats = spn.make_stats(c, momentum, eps, dtype)
        self.scale = self.param("scale", np.ones((num_classes, c), dtype=dtype))
        self.shift = self.param("shift", np.zeros((num_classes, c), dtype=dtype))
        self.z_dim = z_dim
        if z_dim:
            self.z_scale = self.param("z_scale", np.zeros((z_dim, c), dtype=dtype))
            self.z_shift = self.param("z_shift", np.zeros((z_dim, c), dtype=dtype))

    def forward(self, x, train=True, cond=None, z=None):
        if cond is None:
            raise ValueError("conditional batch norm requires cond labels")
        if self.z_dim and z is None:
            raise ValueError("latent-bias batch norm requires z")
        xhat, self.stats, self._ncache = spn.channelwise_normalize(
            x, self.stats, train)
        s = self.scale.data[cond]
        t = self.shift.data[cond]
        if self.z_dim:
            s = s + z @ self.z_scale.data
            t = t + z @ self.z_shift.data
        self._cache = (xhat, s, cond, z)
        return xhat * s[:, None, None, :] + t[:, None, None, :]

    def backward(self, dy):
        xhat, s, cond, z = self._cache
        ds = (dy * xhat).sum(axis=(1, 2))
        dt = dy.sum(axis=(1, 2))
        np.add.at(self.scale.grad, cond, ds)
        np.add.at(self.shift.grad, cond, dt)
        if self.z_dim:
            self.z_scale.grad += z.T @ ds
            self.z_shift.grad += z.T @ dt
        dxhat = dy * s[:, None, None, :]
        return spn.channelwise_normalize_backward(self._ncache, dxhat)

    def _local_buffers(self):
        return _stats_buffers("", self.stats)

    def _load_local_buffers(self, bufs):
        self.stats = _stats_from_buffers("", self.stats, bufs)


class SelfPixelNorm(Layer):
    """Layer wrapper for the self pixel-wise normalization core.

    With num_classes/emb_dim/z_dim set it becomes the conditional variant;
    the wrapper then forwards cond (and z when the latent bias map exists)
    into the functional core, otherwise it drops them.
    """

    def __init__(self, c, rng, kernel_size=3, mask_channels=None,
                 standard_conv=False, num_classes=0, emb_dim=0, z_dim=0,
                 latent_bias=True, sn_proj=False, momentum=0.9, eps=1e-5,
                 dtype=np.float32):
        super().__init__()
        params, self.stats = spn.init_spn_params(
            c, kernel_size, rng, mask_channels, standard_conv, num_classes,
            emb_dim, z_dim, latent_bias, momentum, eps, dtype)
        self._fields = params.field_names()
        for name in self._fields:
            self.param(name, getattr(params, name))
        self._template = params
        self.conditional = params.conditional
        self.capture_mask = False
        self.last_mask = None
        self.sn = SpectralNorm(params.mask_channels, rng, dtype=dtype) \
            if sn_proj else None

    def _materialize(self, train):
        kw = {name: self._params[name].data for name in self._fields}
        params = spn.SpnParams(**kw)
        if self.sn is not None:
            w2 = params.proj_w[0, 0].T
            wbar2, self._sn_cache = self.sn.normalize(w2, train)
            params.proj_w = np.ascontiguousarray(wbar2.T)[None, None]
        return params

    def forward(self, x, train=True, cond=None, z=None):
        params = self._materialize(train)
        if not self.conditional:
            cond = z = None
        elif params.latent_bias_w is None:
            z = None
        y, self.stats, self._cache = spn.spn_forward(
            x, params, self.stats, train, cond=cond, z=z)
        if self.capture_mask:
            self.last_mask = self._cache[3][4]
        return y

    def backward(self, dy):
        dx, grads, self.last_dz = spn.spn_backward(self._cache, dy)
        for name, g in grads.items():
            if name == "proj_w" and self.sn is not None:
                g = self.sn.backward(g[0, 0].T, self._sn_cache).T[None, None]
            self._params[name].grad += g
        return dx

    def _local_buffers(self):
        out = _stats_buffers("main_", self.stats.main)
        out.update(_stats_buffers("mask_", self.stats.mask))
        if self.sn is not None:
            out["sn_u"] = self.sn.u
        return out

    def _load_local_buffers(self, bufs):
        self.stats = spn.SpnStats(
            _stats_from_buffers("main_", self.stats.main, bufs),
            _stats_from_buffers("mask_", self.stats.mask, bufs))
        if self.sn is not None:
            self.sn.u = bufs["sn_u"].astype(self.sn.u.dtype)


class ReLU(Layer):
    def forward(self, x, train=True):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dy):
        return dy * self._mask


class Tanh(Layer):
    def forward(self, x, train=True):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dy):
        return dy * (1.0 - self._y * self._y)


class UpsampleNearest2x(Layer):
    def forward(self, x, train=True):
        b, h, w, c = x.shape
        self._in_shape = x.shape
        return np.broadcast_to(x[:, :, None, :, None, :],
                               (b, h, 2, w, 2, c)).reshape(b, 2 * h, 2 * w, c)

    def backward(self, dy):
        b, h, w, c = self._in_shape
        return dy.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4))


class AvgPool2x2(Layer):
    def forward(self, x, train=True):
        b, h, w, c = x.shape
        self._in_shape = x.shape
        return x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward(self, dy):
        b, h, w, c = self._in_shape
        up = np.broadcast_to(dy[:, :, None, :, None, :] * 0.25,
                             (b, h // 2, 2, w // 2, 2, c))
        return up.reshape(b, h, w, c)


class GlobalSumPool(Layer):
    def forward(self, x, train=True):
        self._in_shape = x.shape
        return x.sum(axis=(1, 2))

    def backward(self, dy):
        b, h, w, c = self._in_shape
        return np.broadcast_to(dy[:, None, None, :], (b, h, w, c)).copy()


class SpatialAttention(Layer):
    """Sigmoid gate from channel statistics: y = x * sigmoid(conv([mean_c, max_c]))."""

    def __init__(self, rng, k=7, dtype=np.float32):
        super().__init__()
        self.conv = self.child("conv", Conv2d(k, 2, 1, rng, dtype=dtype))

    def forward(self, x, train=True):
        mean_c = x.mean(axis=3, keepdims=True)
        max_c = x.max(axis=3, keepdims=True)
        self._argmax = x.argmax(axis=3)
        a = self.conv.forward(np.concatenate([mean_c, max_c], axis=3), train)
        s = spn.sigmoid(a)
        self._cache = (x, s)
        return x * s

    def backward(self, dy):
        x, s = self._cache
        dx = dy * s
        ds = (dy * x).sum(axis=3, keepdims=True)
        da = ds * s * (1.0 - s)
        dcat = self.conv.backward(da)
        c = x.shape[3]
        dx = dx + dcat[..., 0:1] / c
        dmax = np.zeros_like(x)
        np.put_along_axis(dmax, self._argmax[..., None], dcat[..., 1:2], axis=3)
        return dx + dmax

"""Kernel backend selection.

SPNGAN_BACKEND picks the convolution implementation:

* ``numpy``  - pure-numpy kernels only
* ``numba``  - jitted kernels only
* ``auto``   - fastest measured mix (BLAS shifted-GEMM for standard convs,
  jitted loops for depthwise); falls back to numpy when numba is missing

The single-core benchmark behind the ``auto`` policy lives in
benchmarks/bench_kernels.py.
"""

import os

from . import kernels_numpy

try:
    from . import kernels_numba
    HAVE_NUMBA = True
except ImportError:
    kernels_numba = None
    HAVE_NUMBA = False

OPS = (
    "conv2d_forward", "conv2d_input_grad", "conv2d_kernel_grad",
    "depthwise_forward", "depthwise_input_grad", "depthwise_kernel_grad",
)
_DEPTHWISE_OPS = OPS[3:]

_TABLE = {}
_ACTIVE = None


def set_backend(name):
    """Select the kernel table. name is 'auto', 'numpy' or 'numba'."""
    global _ACTIVE
    if name not in ("auto", "numpy", "numba"):
        raise ValueError(
            "SPNGAN_BACKEND must be 'auto', 'numpy' or 'numba', got %r" % (name,))
    if name == "numba" and not HAVE_NUMBA:
        raise ValueError("SPNGAN_BACKEND=numba but numba is not importable")
    if name == "numpy" or (name == "auto" and not HAVE_NUMBA):
        for op in OPS:
            _TABLE[op] = getattr(kernels_numpy, op)
    elif name == "numba":
        for op in OPS:
            _TABLE[op] = getattr(kernels_numba, op)
    else:
        for op in OPS:
            src = kernels_numba if op in _DEPTHWISE_OPS else kernels_numpy
            _TABLE[op] = getattr(src, op)
    _ACTIVE = name


def active_backend():
    return _ACTIVE


set_backend(os.environ.get("SPNGAN_BACKEND", "auto").lower())


def conv2d_forward(x, w):
    return _TABLE["conv2d_forward"](x, w)


def conv2d_input_grad(dy, w):
    return _TABLE["conv2d_input_grad"](dy, w)


def conv2d_kernel_grad(x, dy, k):
    return _TABLE["conv2d_kernel_grad"](x, dy, k)


def depthwise_forward(x, kern):
    return _TABLE["depthwise_forward"](x, kern)


def depthwise_input_grad(dy, kern):
    return _TABLE["depthwise_input_grad"](dy, kern)


def depthwise_kernel_grad(x, dy, k):
    return _TABLE["depthwise_kernel_grad"](x, dy, k)

"""Single-core throughput of the numpy and numba kernel implementations.

Prints GMAC/s per operation on generator-like shapes. This table is the
evidence behind the default backend mix: the GEMM-shaped convolutions run
fastest through numpy's BLAS path, while the depthwise convolutions (no
BLAS mapping, channel-innermost loops) run fastest through numba. Run after
changing kernels to confirm the 'auto' policy still picks the right side.

Usage: python benchmarks/bench_kernels.py [--batch 8] [--repeat 5]
"""

import argparse
import time

import numpy as np

from spngan import kernels_numpy
from spngan.backend import HAVE_NUMBA

if HAVE_NUMBA:
    from spngan import kernels_numba


def time_call(fn, *args, repeat=5):
    fn(*args)  # warm-up (numba compiles here)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def conv_cases(batch, rng):
    # (name, h, w, cin, cout, k) roughly matching the 32px generator blocks
    for h, cin, cout, k in [(8, 256, 256, 3), (16, 256, 256, 3),
                            (32, 256, 3, 3), (8, 256, 256, 1)]:
        x = rng.standard_normal((batch, h, h, cin)).astype(np.float32)
        w = rng.standard_normal((k, k, cin, cout)).astype(np.float32)
        dy = rng.standard_normal((batch, h, h, cout)).astype(np.float32)
        macs = batch * h * h * cin * cout * k * k
        yield "conv %dx%d k%d %d->%d" % (h, h, k, cin, cout), x, w, dy, macs


def depthwise_cases(batch, rng):
    for h, c in [(8, 256), (32, 256)]:
        x = rng.standard_normal((batch, h, h, c)).astype(np.float32)
        w = rng.standard_normal((3, 3, c)).astype(np.float32)
        dy = rng.standard_normal((batch, h, h, c)).astype(np.float32)
        macs = batch * h * h * c * 9
        yield "depthwise %dx%d c%d" % (h, h, c), x, w, dy, macs


def run(batch, repeat):
    rng = np.random.default_rng(0)
    impls = [("numpy", kernels_numpy)]
    if HAVE_NUMBA:
        impls.append(("numba", kernels_numba))
    header = "%-26s %-14s" % ("shape", "op")
    for name, _ in impls:
        header += " %12s" % (name + " GMAC/s")
    print(header)
    for case_gen, ops in [
        (conv_cases, [("forward", lambda m, x, w, dy: m.conv2d_forward(x, w)),
                      ("input_grad", lambda m, x, w, dy: m.conv2d_input_grad(dy, w)),
                      ("kernel_grad", lambda m, x, w, dy: m.conv2d_kernel_grad(x, dy, w.shape[0]))]),
        (depthwise_cases, [("forward", lambda m, x, w, dy: m.depthwise_forward(x, w)),
                           ("input_grad", lambda m, x, w, dy: m.depthwise_input_grad(dy, w)),
                           ("kernel_grad", lambda m, x, w, dy: m.depthwise_kernel_grad(x, dy, w.shape[0]))]),
    ]:
        for label, x, w, dy, macs in case_gen(batch, rng):
            for op_name, op in ops:
                line = "%-26s %-14s" % (label, op_name)
                for _, mod in impls:
                    dt = time_call(op, mod, x, w, dy, repeat=repeat)
                    line += " %12.2f" % (macs / dt / 1e9)
                print(line)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    run(args.batch, args.repeat)

"""Adam with bias correction plus the linear step-size decay schedule."""

import numpy as np


class Adam:
    def __init__(self, named_params, lr, beta1=0.0, beta2=0.9, eps=1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad[...] = 0.0

    def step(self, lr=None):
        if lr is None:
            lr = self.lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        out = {"t": np.array([self.t], dtype=np.int64)}
        for name in self.m:
            out["m/" + name] = self.m[name]
            out["v/" + name] = self.v[name]
        return out

    def load_state(self, flat):
        self.t = int(flat["t"][0])
        for name in self.m:
            self.m[name][...] = flat["m/" + name]
            self.v[name][...] = flat["v/" + name]


def linear_decay_lr(base_lr, it, total_iters, decay_last_iters):
    """Constant, then linear to zero over the final decay_last_iters steps.

    it is the 0-based index of the upcoming update; the very last step
    (it == total_iters - 1) uses base_lr / decay_last_iters."""
    if decay_last_iters <= 0:
        return base_lr
    start = total_iters - decay_last_iters
    if it < start:
        return base_lr
    return base_lr * (total_iters - it) / float(decay_last_iters)

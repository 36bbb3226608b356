"""Adaptive moment estimation over named parameter arrays."""
from __future__ import annotations

import numpy as np


class Adam:
    """Bias-corrected Adam with per-name step sizes.

    State is keyed by parameter name; ``resize`` keeps moments consistent when
    rows are added or removed (densification, pruning).
    """

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = dict(lr) if isinstance(lr, dict) else None
        self.default_lr = None if isinstance(lr, dict) else float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step_size(self, name):
        if self.lr is not None:
            return self.lr[name]
        return self.default_lr

    def step(self, params, grads):
        """Update ``params`` in place from ``grads`` (same keys, same shapes)."""
        for name, g in grads.items():
            lr = self.step_size(name)
            if lr == 0.0:
                continue
            p = params[name]
            m = self.m.get(name)
            if m is None or m.shape != p.shape:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            v = self.v[name]
            self.t[name] += 1
            t = self.t[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mh = m / (1.0 - self.b1 ** t)
            vh = v / (1.0 - self.b2 ** t)
            p -= lr * mh / (np.sqrt(vh) + self.eps)

    def select(self, name, keep):
        """Keep moment rows ``keep`` (index or mask) along the leading axis."""
        if name in self.m:
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]

    def extend(self, name, extra):
        """Append ``extra`` zero rows of moments."""
        if name in self.m and extra:
            pad = [(0, extra)] + [(0, 0)] * (self.m[name].ndim - 1)
            self.m[name] = np.pad(self.m[name], pad)
            self.v[name] = np.pad(self.v[name], pad)

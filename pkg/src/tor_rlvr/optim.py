"""Ascent-direction optimizers over dicts of numpy arrays."""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError


class Optimizer:
    """Updates ``params`` in place to *increase* the objective."""

    def __init__(self, kind="adam", lr=1e-3, momentum=0.9, betas=(0.9, 0.999), eps=1e-8):
        if kind not in ("sgd", "momentum", "adam"):
            raise ConfigurationError(f"unknown optimizer {kind!r}")
        if lr < 0:
            raise ConfigurationError("learning rate must be nonnegative")
        self.kind, self.lr, self.momentum = kind, lr, momentum
        self.b1, self.b2 = betas
        self.eps = eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        for name, g in grads.items():
            if self.kind == "sgd":
                params[name] += self.lr * g
            elif self.kind == "momentum":
                buf = self.m.get(name)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.m[name] = buf
                params[name] += self.lr * buf
            else:
                m = self.m.get(name, np.zeros_like(g))
                v = self.v.get(name, np.zeros_like(g))
                m = self.b1 * m + (1 - self.b1) * g
                v = self.b2 * v + (1 - self.b2) * g * g
                self.m[name], self.v[name] = m, v
                mhat = m / (1 - self.b1 ** self.t)
                vhat = v / (1 - self.b2 ** self.t)
                params[name] += self.lr * mhat / (np.sqrt(vhat) + self.eps)

import numpy as np

from ..linear_rnn import FROZEN
from ..tree import iter_arrays


def trainable(name: str) -> bool:
    return name.rsplit(".", 1)[-1] not in FROZEN


class Adam:
    """Adam over every trainable array leaf of a parameter container, updated in place."""

    def __init__(self, params, lr=3e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(a) for n, a in iter_arrays(params) if trainable(n)}
        self.v = {n: np.zeros_like(a) for n, a in self.m.items()}

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        g_named = dict(iter_arrays(grads))
        for name, arr in iter_arrays(self.params):
            if name not in self.m:
                continue
            g = g_named[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arr -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

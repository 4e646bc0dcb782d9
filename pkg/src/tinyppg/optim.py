"""Adam optimizer operating in place on (value, grad) array pairs."""

import numpy as np


class Adam:
    """Standard Adam with bias correction.

    `param_groups` is a list of (name, value, grad) triples as returned by
    layer ``params()``; values are updated in place so the layers see the
    new weights without any rebinding.
    """

    def __init__(self, param_groups, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(param_groups)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(v) for _, v, _ in self.params]
        self.v = [np.zeros_like(v) for _, v, _ in self.params]

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for (name, value, grad), m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            mhat = m / bc1
            vhat = v / bc2
            value -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(value.dtype)

    def zero_grads(self):
        for _, _, grad in self.params:
            grad[...] = 0

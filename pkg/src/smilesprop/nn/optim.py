"""RMSprop and Adam."""
import numpy as np


class Optimizer:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _grads(self):
        for p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            yield p, g


class RMSprop(Optimizer):
    """acc <- rho*acc + (1-rho)*g^2;  theta <- theta - lr*g/(sqrt(acc) + eps)."""

    def __init__(self, params, lr=1e-3, rho=0.9, eps=1e-8):
        super().__init__(params, lr)
        self.rho = rho
        self.eps = eps
        self.acc = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for (p, g), acc in zip(self._grads(), self.acc):
            acc *= self.rho
            acc += (1.0 - self.rho) * g * g
            p.data -= (self.lr * g / (np.sqrt(acc) + self.eps)).astype(p.dtype)


class Adam(Optimizer):
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for (p, g), m, v in zip(self._grads(), self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

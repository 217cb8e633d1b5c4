"""Finite-difference gradient verification."""
import numpy as np

from .tensor import no_grad


def grad_check(fn, params, eps=1e-5, max_entries=None, seed=0):
    """Largest relative error between autodiff and central differences.

    ``fn`` maps the current parameter values to a scalar Tensor.  Every entry of
    every parameter is probed unless ``max_entries`` caps the count per
    parameter (entries are then sampled with ``seed``).  Relative error is
    |g_auto - g_fd| / max(|g_auto|, |g_fd|, 1e-8).
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check needs float64 parameters")
        p.grad = None
    out = fn()
    out.backward()
    auto = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, auto):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = float(fn().data)
                flat[i] = orig - eps
                down = float(fn().data)
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            a = ga.reshape(-1)[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst

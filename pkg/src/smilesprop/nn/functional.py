"""Differentiable operations.

Every function takes :class:`Tensor` (or array-like constants) and returns a
Tensor.  Layouts are batch-major: sequences are (batch, length, channels).
"""
import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, make_node, unbroadcast

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a.dtype)
    b = as_tensor(b)
    return as_tensor(a, b.dtype), b


# elementwise arithmetic

def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        a.accumulate(unbroadcast(g, a.shape))
        b.accumulate(unbroadcast(g, b.shape))

    return make_node(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        a.accumulate(unbroadcast(g, a.shape))
        b.accumulate(unbroadcast(-g, b.shape))

    return make_node(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(unbroadcast(g * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate(unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_node(a.data / b.data, (a, b), backward)


def neg(x):
    return make_node(-x.data, (x,), lambda g: x.accumulate(-g))


def abs(x):
    x = as_tensor(x)
    # subgradient 0 at x == 0
    return make_node(np.abs(x.data), (x,), lambda g: x.accumulate(g * np.sign(x.data)))


def square(x):
    x = as_tensor(x)
    return make_node(x.data * x.data, (x,), lambda g: x.accumulate(2.0 * g * x.data))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: x.accumulate(g * 0.5 / out))


def log(x):
    x = as_tensor(x)
    return make_node(np.log(x.data), (x,), lambda g: x.accumulate(g / x.data))


def clip(x, lo, hi):
    """Clamp values; gradient passes only where the input was inside."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return make_node(np.clip(x.data, lo, hi), (x,), lambda g: x.accumulate(g * inside))


# reductions and shape ops

def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g, x.shape))

    return make_node(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x, shape):
    return make_node(x.data.reshape(shape), (x,), lambda g: x.accumulate(g.reshape(x.shape)))


def concat(xs, axis=-1):
    data = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, bounds, axis=axis)):
            x.accumulate(part)

    return make_node(data, tuple(xs), backward)


def select(x, index, axis=1):
    """Pick one slice along ``axis`` (drops the axis)."""
    data = np.take(x.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        x.accumulate(full)

    return make_node(data, (x,), backward)


# activations

def relu(x):
    pos = x.data > 0
    return make_node(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: x.accumulate(g * pos))


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_node(out, (x,), lambda g: x.accumulate(g * out * (1.0 - out)))


def tanh(x):
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: x.accumulate(g * (1.0 - out * out)))


def selu(x):
    pos = x.data > 0
    ex = np.exp(np.minimum(x.data, 0))
    out = SELU_SCALE * np.where(pos, x.data, SELU_ALPHA * (ex - 1.0))

    def backward(g):
        x.accumulate(g * SELU_SCALE * np.where(pos, 1.0, SELU_ALPHA * ex))

    return make_node(out.astype(x.dtype), (x,), backward)


def softplus(x):
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return make_node(out, (x,), lambda g: x.accumulate(g * sig))


def identity(x):
    return x


ACTIVATIONS = {
    "linear": identity,
    "sigmoid": sigmoid,
    "relu": relu,
    "selu": selu,
    "softplus": softplus,
    "tanh": tanh,
}


def activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}") from None


# layers

def embedding(indices, table):
    """Row lookup: (batch, length) int indices -> (batch, length, width)."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise TypeError("embedding indices must be integers")
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = idx[(idx < 0) | (idx >= vocab)].flat[0]
        raise IndexError(f"token index {bad} outside embedding table of {vocab} rows")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        table.accumulate(grad)

    return make_node(table.data[idx], (table,), backward)


def linear(x, w, b=None):
    """Affine map over the last axis: x @ w + b."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight rows {w.shape[0]}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            x.accumulate((g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w.accumulate(x2.T @ g2)
        if b is not None and b.requires_grad:
            b.accumulate(g2.sum(axis=0))

    return make_node(out.reshape(x.shape[:-1] + (w.shape[1],)), parents, backward)


def dense(x, w, b, act="linear"):
    return activation(act)(linear(x, w, b))


def conv1d(x, w, b=None):
    """Stride-1 'same' convolution.  x: (B, L, Cin), w: (K, Cin, Cout), K odd."""
    K, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv1d: input has {x.shape[-1]} channels, kernel expects {cin}")
    if K % 2 != 1:
        raise ValueError("conv1d kernel width must be odd")
    B, L, _ = x.shape
    pad = (K - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0))) if pad else x.data
    out = np.zeros((B * L, cout), dtype=x.dtype)
    for k in range(K):
        out += xp[:, k : k + L, :].reshape(B * L, cin) @ w.data[k]
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(B * L, cout)
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for k in range(K):
                gw[k] = xp[:, k : k + L, :].reshape(B * L, cin).T @ g2
            w.accumulate(gw)
        if b is not None and b.requires_grad:
            b.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k : k + L, :] += (g2 @ w.data[k].T).reshape(B, L, cin)
            x.accumulate(gxp[:, pad : pad + L, :] if pad else gxp)

    return make_node(out.reshape(B, L, cout), parents, backward)


def _recurrent(x, wx, wh, b, reverse, gates, forward_kernel, backward_kernel):
    B, L, C = x.shape
    H = wh.shape[0]
    if wx.shape != (C, gates * H) or wh.shape != (H, gates * H) or b.shape != (gates * H,):
        raise ValueError(
            f"recurrent parameter shapes {wx.shape}, {wh.shape}, {b.shape} do not fit input width {C}"
        )
    x2 = x.data.reshape(B * L, C)
    xp = (x2 @ wx.data + b.data).reshape(B, L, gates * H)
    xp = np.ascontiguousarray(xp.transpose(1, 0, 2))
    whd = np.ascontiguousarray(wh.data)
    saved = forward_kernel(xp, whd, reverse)
    hs = saved[0]

    def backward(g):
        dhs = np.ascontiguousarray(g.transpose(1, 0, 2), dtype=hs.dtype)
        dxp, dwh = backward_kernel(dhs, *saved, whd, reverse, wh.requires_grad)
        wh.accumulate(dwh)
        dxp2 = dxp.transpose(1, 0, 2).reshape(B * L, gates * H)
        if wx.requires_grad:
            wx.accumulate(x2.T @ dxp2)
        b.accumulate(dxp2.sum(axis=0))
        if x.requires_grad:
            x.accumulate((dxp2 @ wx.data.T).reshape(B, L, C))

    return make_node(np.ascontiguousarray(hs.transpose(1, 0, 2)), (x, wx, wh, b), backward)


def gru(x, wx, wh, b, reverse=False):
    """One GRU direction over the full sequence; returns (B, L, H) hidden states.

    Gates: z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    candidate n = tanh(x Wn + (r*h) Un + bn), h' = (1 - z) h + z n.
    Column blocks of ``wx``/``wh``/``b`` are ordered [z, r, n].
    """
    return _recurrent(x, wx, wh, b, reverse, 3, kernels.gru_forward, kernels.gru_backward)


def lstm(x, wx, wh, b, reverse=False):
    """One LSTM direction; column blocks ordered [input, forget, cell, output]."""
    return _recurrent(x, wx, wh, b, reverse, 4, kernels.lstm_forward, kernels.lstm_backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.99, eps=1e-6):
    """Normalize over every axis but the last.

    In training mode the running statistics (plain ndarrays) are updated in
    place: running = momentum * running + (1 - momentum) * batch.
    """
    axes = tuple(range(x.ndim - 1))
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2")
        # float64 so large activations cannot overflow the variance
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mu) * inv).astype(x.dtype)
    out = (xhat * gamma.data + beta.data).astype(x.dtype)
    n = x.data.size // x.shape[-1]

    def backward(g):
        gamma.accumulate((g * xhat).sum(axis=axes))
        beta.accumulate(g.sum(axis=axes))
        if not x.requires_grad:
            return
        gx = g * gamma.data
        if training:
            gx = inv / n * (n * gx - gx.sum(axis=axes) - xhat * (gx * xhat).sum(axis=axes))
        else:
            gx = gx * inv
        x.accumulate(gx)

    return make_node(out, (x, gamma, beta), backward)

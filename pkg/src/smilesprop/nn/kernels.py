"""Recurrent kernel selection.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over.  Set ``SMILESPROP_PURE_PYTHON=1`` to force the
fallback (handy for benchmarking and for checking the two agree).
"""
from contextlib import contextmanager
import os

from . import _recurrent_py

BACKEND = "python"
_impl = _recurrent_py

if not os.environ.get("SMILESPROP_PURE_PYTHON"):
    try:
        from . import _recurrent as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


@contextmanager
def flush_denormals():
    """Treat subnormal floats as zero inside the block (x86 with the compiled extension only).

    Gradients that decay into the subnormal range make BLAS and ufunc loops
    an order of magnitude slower; training loops run under this.
    """
    if BACKEND != "cython":
        yield
        return
    old = _impl.enter_ftz()
    try:
        yield
    finally:
        _impl.leave_ftz(old)


def use_backend(name):
    """Switch kernels at runtime; returns the previous backend name."""
    global _impl, BACKEND
    previous = BACKEND
    if name == "python":
        _impl = _recurrent_py
    elif name == "cython":
        from . import _recurrent as _compiled

        _impl = _compiled
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
    return previous


def gru_forward(xp, wh, reverse):
    return _impl.gru_forward(xp, wh, reverse)


def gru_backward(dhs, hs, zs, rs, ns, wh, reverse, need_wh_grad=True):
    return _impl.gru_backward(dhs, hs, zs, rs, ns, wh, reverse, need_wh_grad)


def lstm_forward(xp, wh, reverse):
    return _impl.lstm_forward(xp, wh, reverse)


def lstm_backward(dhs, hs, cs, gates, wh, reverse, need_wh_grad=True):
    return _impl.lstm_backward(dhs, hs, cs, gates, wh, reverse, need_wh_grad)

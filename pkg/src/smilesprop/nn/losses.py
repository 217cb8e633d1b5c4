"""Training losses."""
import numpy as np

from . import functional as F
from .tensor import as_tensor

BCE_CLAMP = 1e-7


def bce(pred, target, label_mask=None):
    """Mean binary cross-entropy over the unmasked entries.

    ``label_mask`` is 1 where a label exists and 0 where it is missing (multi-task
    data); predictions are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"bce: prediction shape {pred.shape} vs target shape {target.shape}")
    mask = np.ones_like(target) if label_mask is None else np.asarray(label_mask, dtype=pred.dtype)
    count = mask.sum()
    if count == 0:
        raise ValueError("bce: every label is masked out")
    target = np.where(mask > 0, target, 0).astype(pred.dtype)
    p = F.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = F.add(F.mul(target, F.log(p)), F.mul(1.0 - target, F.log(F.sub(1.0, p))))
    return F.mul(F.sum(F.mul(ll, mask)), -1.0 / count)


def mae(pred, target):
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"mae: prediction shape {pred.shape} vs target shape {target.shape}")
    if target.size == 0:
        raise ValueError("mae: empty batch")
    return F.mean(F.abs(F.sub(pred, target)))


def mse(pred, target):
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"mse: prediction shape {pred.shape} vs target shape {target.shape}")
    if target.size == 0:
        raise ValueError("mse: empty batch")
    return F.mean(F.square(F.sub(pred, as_tensor(target))))

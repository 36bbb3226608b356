"""Photometric losses with pixelwise gradients for the renderer backward pass."""
import numpy as np

from .metrics import MetricShapeError, ssim_with_grad


def l1_with_grad(pred, target, mask=None):
    """Mean absolute error over pixels and channels, optionally masked (mask broadcasts over channels)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise MetricShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        if m.ndim == diff.ndim - 1:
            m = m[..., None]
        diff = diff * m
        grad = np.sign(diff) * m / diff.size
    else:
        grad = np.sign(diff) / diff.size
    return float(np.mean(np.abs(diff))), grad


def color_loss(pred, target, lambda_s=0.2):
    """``(1 - lambda_s) * L1 + lambda_s * (1 - SSIM)`` and its gradient w.r.t. ``pred``."""
    l1, g1 = l1_with_grad(pred, target)
    if lambda_s == 0.0:
        return (1.0 - lambda_s) * l1, (1.0 - lambda_s) * g1
    s, gs = ssim_with_grad(pred, target)
    return (1.0 - lambda_s) * l1 + lambda_s * (1.0 - s), (1.0 - lambda_s) * g1 - lambda_s * gs

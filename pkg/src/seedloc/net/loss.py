"""Target-weighted mean squared error."""
from __future__ import annotations

import numpy as np


def weighted_mse_loss(pred, target, weight_floor: float = 0.0):
    """Mean over all voxels of ``(P + floor) * (P - P_hat)**2``.

    Returns ``(loss, grad_pred)``. With ``weight_floor = 0`` the weight is the
    target itself, so background voxels (P = 0) contribute neither loss nor
    gradient.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    n = pred.size
    weight = target.astype(np.float64) + weight_floor
    diff = target.astype(np.float64) - pred.astype(np.float64)
    loss = float(np.sum(weight * diff * diff) / n)
    grad = (-2.0 / n) * weight * diff
    return loss, grad.astype(pred.dtype)

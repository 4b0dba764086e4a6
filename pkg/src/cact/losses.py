"""Cross-entropy objectives (base-2 logarithm) and per-image sample weights.

Using log2 instead of ln scales every loss and gradient by 1/ln 2; the
minimizer is unchanged.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

PROB_FLOOR = 1e-12


def _check_distribution(p: Tensor, axis: int) -> None:
    drift = np.abs(p.data.sum(axis=axis) - 1.0)
    if drift.size and drift.max() > 1e-6:
        raise ContractError(f"predictions are not normalized along axis {axis} (max |sum-1| = {drift.max():.3g})")


def one_hot(labels, n_classes: int, axis: int = 1) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    eye = np.eye(n_classes)[labels]  # [..., C]
    return np.moveaxis(eye, -1, axis)


def loss_cls(Y, Y_pred: Tensor) -> Tensor:
    """Mean over images of ``-sum_c Y_c log2 Y'_c``; ``Y`` is one-hot ``[K, C]``."""
    return loss_weighted(Y, Y_pred, None)


def loss_weighted(Y, Y_pred: Tensor, weights=None) -> Tensor:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape != Y_pred.shape:
        raise ContractError(f"target shape {Y.shape} != prediction shape {Y_pred.shape}")
    _check_distribution(Y_pred, axis=1)
    if weights is not None:
        Y = np.asarray(weights, dtype=np.float64)[:, None] * Y
    K = Y.shape[0]
    logp = T.log2(T.clamp_min(Y_pred, PROB_FLOOR))
    return T.mul(T.tsum(T.mul(logp, Y)), -1.0 / K)


def loss_seg(S, S_pred: Tensor) -> Tensor:
    """Per-cell cross-entropy, averaged over cells within an image and then over images.

    ``S`` and ``S_pred`` are ``[K, C, M, N]``; ``S`` is one-hot along axis 1.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.shape != S_pred.shape:
        raise ContractError(f"mask shape {S.shape} != prediction shape {S_pred.shape}")
    _check_distribution(S_pred, axis=1)
    K, _, M, N = S.shape
    logp = T.log2(T.clamp_min(S_pred, PROB_FLOOR))
    return T.mul(T.tsum(T.mul(logp, S)), -1.0 / (K * M * N))


def loss_joint(Y, Y_pred: Tensor, S, S_pred: Tensor, alpha_joint: float) -> Tensor:
    if not 0.0 <= alpha_joint <= 1.0:
        raise ContractError(f"alpha_joint must lie in [0, 1], got {alpha_joint}")
    return T.add(T.mul(loss_cls(Y, Y_pred), alpha_joint), T.mul(loss_seg(S, S_pred), 1.0 - alpha_joint))


def sample_weight(roi_ratio: float, alpha_roi: float = 0.10) -> float:
    """``1/roi`` when ``roi > alpha_roi``, else the cap ``1/alpha_roi``."""
    if not 0.0 <= roi_ratio <= 1.0:
        raise ContractError(f"roi ratio must lie in [0, 1], got {roi_ratio}")
    return 1.0 / roi_ratio if roi_ratio > alpha_roi else 1.0 / alpha_roi

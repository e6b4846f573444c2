"""Loss functions. Each returns ``(loss, grad_wrt_prediction)``."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateInputError, ShapeError
from .layers import log_softmax, softmax

COSINE_EPS = 1e-8


def cross_entropy_loss(logits, labels):
    """Mean of ``-log softmax(logits)[label]`` over the batch.

    ``logits`` may be a single ``(K,)`` vector with a scalar label.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    if single:
        logits = logits[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), (grad[0] if single else grad).astype(logits.dtype)


def cosine_distance_loss(pred, target, eps: float = COSINE_EPS):
    """``1 - <p, t> / (|p| |t| + eps)`` per sequence, averaged over the batch.

    The leading axis indexes sequences; everything after it is flattened, so a
    ``(N, T, 1)`` prediction is compared to an ``(N, T)`` or ``(N, T, 1)``
    target as one whole-utterance vector each. 1-D inputs are one sequence.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    shape = pred.shape
    if pred.ndim == 1:
        p, t = pred[None].astype(np.float64), target.reshape(1, -1).astype(np.float64)
    else:
        p = pred.reshape(shape[0], -1).astype(np.float64)
        t = target.reshape(shape[0], -1).astype(np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ in size")
    t_norm = np.linalg.norm(t, axis=1)
    if np.any(t_norm == 0):
        raise DegenerateInputError("cosine distance undefined for an all-zero target")
    p_norm = np.linalg.norm(p, axis=1)
    dot = np.sum(p * t, axis=1)
    denom = p_norm * t_norm + eps
    loss = 1.0 - dot / denom
    unit_p = p / np.where(p_norm > 0, p_norm, 1.0)[:, None]
    grad = -(t / denom[:, None] - (dot * t_norm / denom ** 2)[:, None] * unit_p)
    n = p.shape[0]
    return float(loss.mean()), (grad / n).reshape(shape).astype(pred.dtype)

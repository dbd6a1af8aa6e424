"""Focal, cross-entropy and sum-squared losses with their gradients.

Each function returns ``(loss, grad)`` where ``loss`` is summed over all
elements and ``grad`` has the shape of the differentiated input.
"""

from __future__ import annotations

import numpy as np

from .functional import log_sigmoid, log_softmax, sigmoid

PROB_CLAMP = 1e-7


def _pow(base: np.ndarray, exponent: float) -> np.ndarray:
    # 0 ** 0 == 1, and negative exponents on a zero base contribute nothing
    if exponent == 0:
        return np.ones_like(base)
    if exponent < 0:
        out = np.zeros_like(base)
        np.power(base, exponent, out=out, where=base > 0)
        return out
    return base**exponent


def focal_sigmoid_loss(y, target, gamma: float = 2.0):
    """Focal loss on sigmoid probabilities ``y`` against 0/1 targets.

    ``-(1-y)^gamma log y`` where the target is 1, ``-y^gamma log(1-y)``
    elsewhere. Probabilities are clamped to ``[1e-7, 1-1e-7]``; the gradient
    is zero where the clamp is active.
    """
    y = np.asarray(y)
    t = np.asarray(target).astype(bool)
    yc = np.clip(y, PROB_CLAMP, 1 - PROB_CLAMP)
    pos_loss = -_pow(1 - yc, gamma) * np.log(yc)
    neg_loss = -_pow(yc, gamma) * np.log1p(-yc)
    loss = np.where(t, pos_loss, neg_loss)
    pos_grad = gamma * _pow(1 - yc, gamma - 1) * np.log(yc) - _pow(1 - yc, gamma) / yc
    neg_grad = -gamma * _pow(yc, gamma - 1) * np.log1p(-yc) + _pow(yc, gamma) / (1 - yc)
    grad = np.where(t, pos_grad, neg_grad)
    grad = np.where((y > PROB_CLAMP) & (y < 1 - PROB_CLAMP), grad, 0.0)
    return float(loss.sum()), grad.astype(y.dtype, copy=False)


def focal_sigmoid_with_logits(logits, target, gamma: float = 2.0, reduce: bool = True):
    """The same loss evaluated from logits, stable for saturated inputs.

    Gradient with respect to the logit ``x`` with ``p = sigmoid(x)``:
    positives ``gamma p (1-p)^gamma log p - (1-p)^(gamma+1)``,
    negatives ``-gamma p^gamma (1-p) log(1-p) + p^(gamma+1)``.
    """
    x = np.asarray(logits)
    t = np.asarray(target).astype(bool)
    p = sigmoid(x)
    q = sigmoid(-x)
    log_p = log_sigmoid(x)
    log_q = log_sigmoid(-x)
    pos_loss = -_pow(q, gamma) * log_p
    neg_loss = -_pow(p, gamma) * log_q
    loss = np.where(t, pos_loss, neg_loss)
    pos_grad = gamma * p * _pow(q, gamma) * log_p - _pow(q, gamma + 1)
    neg_grad = -gamma * _pow(p, gamma) * q * log_q + _pow(p, gamma + 1)
    grad = np.where(t, pos_grad, neg_grad).astype(x.dtype, copy=False)
    return (float(loss.sum()) if reduce else loss), grad


def focal_softmax_loss(probs, onehot, gamma: float = 2.0):
    """``-(1-y)^gamma log y`` with ``y`` the probability of the true category.

    ``probs`` and ``onehot`` are ``(..., C)``; the gradient is taken with
    respect to ``probs`` and only the true-category column is non-zero.
    """
    probs = np.asarray(probs)
    onehot = np.asarray(onehot).astype(bool)
    y = np.clip((probs * onehot).sum(axis=-1), PROB_CLAMP, 1.0)
    loss = -_pow(1 - y, gamma) * np.log(y)
    g = gamma * _pow(1 - y, gamma - 1) * np.log(y) - _pow(1 - y, gamma) / y
    grad = np.where(onehot, g[..., None], 0.0).astype(probs.dtype, copy=False)
    return float(loss.sum()), grad


def focal_softmax_with_logits(logits, onehot, gamma: float = 2.0, reduce: bool = True):
    """Softmax focal loss from logits; gradient with respect to the logits.

    With ``y`` the true-category probability,
    ``dL/dz_j = [gamma y (1-y)^(gamma-1) log y - (1-y)^gamma] (1[j=c] - p_j)``.
    """
    z = np.asarray(logits)
    onehot = np.asarray(onehot).astype(bool)
    logp = log_softmax(z)
    p = np.exp(logp)
    log_y = (logp * onehot).sum(axis=-1)
    y = np.exp(log_y)
    one_minus_y = (p * ~onehot).sum(axis=-1)
    loss = -_pow(one_minus_y, gamma) * log_y
    coef = gamma * y * _pow(one_minus_y, gamma - 1) * log_y - _pow(one_minus_y, gamma)
    grad = (coef[..., None] * (onehot - p)).astype(z.dtype, copy=False)
    return (float(loss.sum()) if reduce else loss), grad


def binary_cross_entropy(y, target):
    """Plain BCE on probabilities, written independently of the focal path."""
    y = np.clip(np.asarray(y, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    t = np.asarray(target, dtype=np.float64)
    return float(-np.sum(t * np.log(y) + (1 - t) * np.log(1 - y)))


def softmax_cross_entropy(probs, onehot):
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0)
    return float(-np.sum(np.asarray(onehot) * np.log(p)))


def sum_squared_loss(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.sum(diff * diff)), 2 * diff

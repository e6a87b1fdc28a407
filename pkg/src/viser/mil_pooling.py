"""Noisy-OR multiple-instance pooling over H x W x N logit grids.

Per-location probabilities ``p_j = sigmoid(f_j)`` are pooled per class as
``p = 1 - prod_j (1 - p_j)``. Everything is evaluated in log space:
``-log(1 - p_j) = softplus(f_j)``, so ``1 - p = exp(-S)`` with ``S`` the
softplus sum, and neither the product nor the loss ever cancels
catastrophically.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFinite, ShapeError

LOG_FLOOR = 1e-30
MAX_TERM = -np.log(LOG_FLOOR)  # ~69.08, the worst per-class loss


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(x):
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def as_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 3 or min(g.shape) < 1:
        raise ShapeError(f"logit grid must be H x W x N with all sides >= 1, got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFinite("logit grid has non-finite entries")
    return g


def _labels(y, n):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"label vector has shape {y.shape}, expected ({n},)")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("label entries must be 0 or 1")
    return y.astype(np.float64)


def _log1mexp(s):
    """log(1 - exp(-s)) for s > 0, accurate at both ends."""
    with np.errstate(divide="ignore"):
        return np.where(s > np.log(2.0), np.log1p(-np.exp(-s)), np.log(-np.expm1(-s)))


def location_probs(grid) -> np.ndarray:
    return sigmoid(as_grid(grid))


def _softplus_sums(g):
    return softplus(g).sum(axis=(0, 1))


def noisy_or(grid) -> np.ndarray:
    """Pooled class probabilities, shape (N,)."""
    return -np.expm1(-_softplus_sums(as_grid(grid)))


def noisy_or_direct(grid) -> np.ndarray:
    """Literal product form; kept as the reference for the log-space path."""
    p = sigmoid(as_grid(grid))
    return 1.0 - np.prod(1.0 - p, axis=(0, 1))


def mil_loss_terms(grid, y):
    """Per-class cross-entropy terms and the mask of classes hit by the clamp."""
    g = as_grid(grid)
    y = _labels(y, g.shape[2])
    s = _softplus_sums(g)
    # -log p = -log(1 - exp(-s)); p is floored at LOG_FLOOR
    pos = np.minimum(-_log1mexp(s), MAX_TERM)
    # -log(1 - p) = s, with the same floor on 1 - p
    neg = np.minimum(s, MAX_TERM)
    clamped = np.where(y == 1, -np.expm1(-s) < LOG_FLOOR, s > MAX_TERM)
    return np.where(y == 1, pos, neg), clamped


def mil_loss(grid, y) -> float:
    terms, _ = mil_loss_terms(grid, y)
    return float(terms.sum())


def mil_loss_grad(grid, y) -> np.ndarray:
    """d loss / d logits, same shape as the grid.

    Negative class: softplus'(f) = sigmoid(f). Positive class:
    d/dS[-log(1 - e^-S)] = -1 / expm1(S), times sigmoid(f_j). Entries of a
    clamped class are zero, matching the flat clamped loss.
    """
    g = as_grid(grid)
    y = _labels(y, g.shape[2])
    s = _softplus_sums(g)
    sig = sigmoid(g)
    with np.errstate(divide="ignore", over="ignore"):
        dpos = -1.0 / np.expm1(s)
    _, clamped = mil_loss_terms(g, y)
    coef = np.where(y == 1, dpos, 1.0)
    coef = np.where(clamped, 0.0, coef)
    return sig * coef[None, None, :]


def localize(grid, cls: int) -> tuple[int, int]:
    """Row-major first argmax of one class heatmap."""
    g = as_grid(grid)
    if not 0 <= cls < g.shape[2]:
        raise IndexError(f"class {cls} out of range for {g.shape[2]} classes")
    flat = int(np.argmax(g[:, :, cls]))
    return divmod(flat, g.shape[1])

"""Soft Dice loss (training) and thresholded Dice score (evaluation)."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, ShapeError

DEFAULT_EPS = 1e-5


def _check_range(name: str, arr: np.ndarray) -> None:
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise DomainError(f"{name} values must lie in [0, 1], got [{arr.min()}, {arr.max()}]")


def dice_loss(pred: Tensor, target, eps: float = DEFAULT_EPS) -> Tensor:
    """1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps), summed over the whole batch."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    g = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != g.shape:
        raise ShapeError(f"dice_loss: pred {pred.shape} vs target {g.shape}")
    if eps <= 0:
        raise DomainError("eps must be positive")
    _check_range("pred", pred.data)
    _check_range("target", g)
    gt = Tensor(g)
    inter = ad.sum_all(ad.mul(pred, gt))
    denom = ad.add(ad.sum_all(ad.mul(pred, pred)), float((g * g).sum()) + eps)
    return ad.rsub(ad.div(ad.add(ad.mul(inter, 2.0), eps), denom), 1.0)


def dice_score(pred, target, threshold: float = 0.5) -> float:
    """Binarize both masks at ``threshold`` (strictly greater) and return 2|A&B| / (|A|+|B|).

    Two empty masks score 1.0.
    """
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred)
    g = np.asarray(target.data if isinstance(target, Tensor) else target)
    if p.shape != g.shape:
        raise ShapeError(f"dice_score: {p.shape} vs {g.shape}")
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"threshold must be in (0, 1), got {threshold}")
    a = p > threshold
    b = g > threshold
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total

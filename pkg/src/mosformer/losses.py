"""Segmentation losses: cross-entropy, soft Dice and the deep-supervision sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DataError, DimensionError, InputError
from .tensor import Tensor, as_tensor, log_softmax, softmax

DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class LossWeights:
    """Per-resolution weights (full, 1/2, 1/4) and the CE / Dice mix."""

    full: float = 0.5
    half: float = 0.25
    quarter: float = 0.125
    ce: float = 0.8
    dice: float = 1.2

    def __post_init__(self):
        if min(self.full, self.half, self.quarter, self.ce, self.dice) < 0:
            raise InputError("loss weights must be nonnegative")


def _check(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim == 3:
        logits_shape = (1,) + logits.shape
        labels = labels.reshape((1,) + labels.shape) if labels.ndim == 2 else labels
    else:
        logits_shape = logits.shape
    if labels.shape != (logits_shape[0],) + logits_shape[2:]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    n_classes = logits_shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.int64, copy=False)


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float32) -> np.ndarray:
    """``(N, h, w)`` integer labels to ``(N, C0, h, w)`` indicators."""
    return np.moveaxis(np.eye(n_classes, dtype=dtype)[labels], -1, 1)


def _batched(logits: Tensor) -> Tensor:
    return logits.reshape((1,) + logits.shape) if logits.ndim == 3 else logits


def ce_loss(logits, labels) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[true class]``.

    ``logits`` is ``(N, C0, h, w)`` or ``(C0, h, w)``; ``labels`` matches
    without the class axis.
    """
    logits = as_tensor(logits)
    labels = _check(logits, labels)
    logp = log_softmax(_batched(logits), axis=1)
    hot = one_hot(labels, logp.shape[1], logp.dtype)
    return -(logp * hot).sum() * (1.0 / labels.size)


def dice_loss(logits, labels, smooth: float = DICE_SMOOTH) -> Tensor:
    """``1 - mean_c (2 Σ p g + ε) / (Σ p + Σ g + ε)`` with softmax probabilities ``p``.

    Sums run over the whole batch; every class, background included, enters
    the mean.
    """
    logits = as_tensor(logits)
    labels = _check(logits, labels)
    probs = softmax(_batched(logits), axis=1)
    hot = one_hot(labels, probs.shape[1], probs.dtype)
    axes = (0, 2, 3)
    inter = (probs * hot).sum(axis=axes)
    denom = probs.sum(axis=axes) + hot.sum(axis=axes)
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    return 1.0 - dice.mean()


def seg_loss(logits, labels, weights: LossWeights = LossWeights()) -> Tensor:
    """``ce * CE + dice * Dice`` at one resolution."""
    return ce_loss(logits, labels) * weights.ce + dice_loss(logits, labels) * weights.dice


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour label downsampling: keep every ``factor``-th pixel."""
    return np.asarray(labels)[..., ::factor, ::factor]


def deep_supervision_terms(stack, labels, weights: LossWeights = LossWeights()) -> dict:
    """Individual CE / Dice terms per resolution plus their weighted sum under ``"loss"``."""
    labels = np.asarray(labels)
    terms = {}
    total = None
    for name, logits, factor in zip(("full", "half", "quarter"), stack, (1, 2, 4)):
        lbl = downsample_labels(labels, factor)
        ce = ce_loss(logits, lbl)
        dice = dice_loss(logits, lbl)
        terms[f"ce_{name}"] = ce
        terms[f"dice_{name}"] = dice
        part = (ce * weights.ce + dice * weights.dice) * getattr(weights, name)
        total = part if total is None else total + part
    terms["loss"] = total
    return terms


def deep_supervision_loss(stack, labels, weights: LossWeights = LossWeights()) -> Tensor:
    """Weighted sum of per-resolution losses for full, half and quarter logits."""
    return deep_supervision_terms(stack, labels, weights)["loss"]

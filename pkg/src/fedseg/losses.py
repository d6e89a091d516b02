"""Segmentation and consistency losses.

Probability maps are ``(..., 2)`` arrays (background, foreground) as produced
by the softmax head; targets and masks are the matching ``(...)`` arrays.
Every ``*_and_grad`` function returns ``(loss, d loss / d pred)`` with the
gradient shaped like ``pred``; pseudo-labels and masks are constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMOOTH = 1e-5
CE_CLAMP = 1e-7

BASES = ("l1", "l2", "ce", "dice_soft", "dice_hard")
REGIONS = ("whole", "foreground")
_SHORT = {"l1": "L1", "l2": "L2", "ce": "CE", "dice_soft": "Dice_S", "dice_hard": "Dice_H"}


@dataclass(frozen=True)
class LossKind:
    base: str = "dice_hard"
    region: str = "foreground"

    def __post_init__(self):
        if self.base not in BASES:
            raise ValueError(f"unknown loss base {self.base!r}")
        if self.region not in REGIONS:
            raise ValueError(f"unknown loss region {self.region!r}")

    @property
    def name(self) -> str:
        """Table-style label: ``L1``, ``L1_F``, ``Dice_S``, ``Dice_SF`` ..."""
        s = _SHORT[self.base]
        if self.region == "whole":
            return s
        return s + "F" if s.startswith("Dice") else s + "_F"

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        for kind in ALL_LOSS_KINDS:
            if text.lower() in (kind.name.lower(), f"{kind.base}:{kind.region}"):
                return kind
        raise ValueError(f"unknown loss kind {text!r}")

    def __str__(self):
        return self.name


ALL_LOSS_KINDS = tuple(LossKind(b, r) for b in BASES for r in REGIONS)
DEFAULT_KIND = LossKind("dice_hard", "foreground")


def _check_binary(target):
    if not np.isin(target, (0, 1)).all():
        raise ValueError("target must be binary (0/1)")


def _acc(a):
    # float64 accumulation, or wider when the input already is
    return np.promote_types(np.asarray(a).dtype, np.float64)


def _dice_channel(p, y, smooth):
    acc = _acc(p)
    num = 2.0 * np.sum(y * p, dtype=acc) + smooth
    den = np.sum(y * y, dtype=acc) + np.sum(p * p, dtype=acc) + smooth
    loss = 1.0 - num / den
    grad = -(2.0 * y * den - num * 2.0 * p) / (den * den)
    return loss, grad


def _dice(pred, fg_target, region, smooth, mask=None):
    pred = np.asarray(pred)
    fg_target = np.asarray(fg_target, dtype=pred.dtype)
    m = np.ones(fg_target.shape, pred.dtype) if mask is None else np.asarray(mask, pred.dtype)
    grad = np.zeros_like(pred, dtype=_acc(pred))
    channels = (1,) if region == "foreground" else (0, 1)
    total = 0.0
    for c in channels:
        y = fg_target if c == 1 else 1.0 - fg_target
        loss, g = _dice_channel(m * pred[..., c], m * y, smooth)
        total += loss
        grad[..., c] = m * g
    k = len(channels)
    return total / k, (grad / k).astype(pred.dtype)


def soft_dice_loss_and_grad(pred, target, region="foreground", smooth=SMOOTH):
    """Soft Dice ``1 - (2 sum y p + eps) / (sum y^2 + sum p^2 + eps)``.

    ``foreground`` scores the foreground channel only; ``whole`` averages
    the background and foreground channel losses. Sums run over every pixel
    of the batch. Empty target and empty prediction give 0.
    """
    if region not in REGIONS:
        raise ValueError(f"unknown region {region!r}")
    _check_binary(target)
    if np.shape(pred)[:-1] != np.shape(target):
        raise ValueError(f"prediction {np.shape(pred)} does not match target {np.shape(target)}")
    return _dice(pred, target, region, smooth)


def soft_dice_loss(pred, target, region="foreground", smooth=SMOOTH) -> float:
    return float(soft_dice_loss_and_grad(pred, target, region, smooth)[0])


def supervised_loss_and_grad(pred, label):
    return soft_dice_loss_and_grad(pred, label, "foreground")


def supervised_loss(pred, label) -> float:
    return float(supervised_loss_and_grad(pred, label)[0])


def _fg(prob):
    prob = np.asarray(prob)
    return prob[..., 1] if prob.ndim >= 1 and prob.shape[-1] == 2 else prob


def make_pseudo_label(prob) -> np.ndarray:
    """Binary foreground mask ``fg > 0.5`` (strict). Accepts a 2-channel
    map or a foreground-probability array."""
    return (_fg(prob) > 0.5).astype(np.float32)


def confidence_mask(prob, tau: float) -> np.ndarray:
    """``fg > tau`` (strict) with ``tau`` in [0.5, 1]."""
    if not 0.5 <= tau <= 1.0:
        raise ValueError(f"confidence threshold must be in [0.5, 1], got {tau}")
    return (_fg(prob) > tau).astype(np.float32)


def consistency_loss_and_grad(kind: LossKind, pred_aug, pseudo, mask, soft_target=None):
    """Masked distance between the pseudo-label and the prediction on the
    perturbed input.

    Pixel-wise kinds (L1, L2, CE) average over masked pixels; Dice kinds
    score the masked maps. ``soft_target`` (foreground probabilities of the
    unperturbed pass) is the target of ``dice_soft``; the binary pseudo-label
    is the target of every other kind. An all-zero mask gives 0.
    """
    if not isinstance(kind, LossKind):
        raise ValueError(f"unknown loss kind {kind!r}")
    pred = np.asarray(pred_aug)
    pseudo = np.asarray(pseudo, dtype=pred.dtype)
    m = np.asarray(mask, dtype=pred.dtype)
    if pred.shape[:-1] != pseudo.shape or pseudo.shape != m.shape:
        raise ValueError(f"shapes differ: pred {pred.shape}, pseudo {pseudo.shape}, mask {m.shape}")
    if kind.base in ("dice_hard", "dice_soft"):
        target = pseudo
        if kind.base == "dice_soft" and soft_target is not None:
            target = np.asarray(_fg(soft_target), dtype=pred.dtype)
        return _dice(pred, target, kind.region, SMOOTH, m)

    acc = _acc(pred)
    count = float(np.sum(m, dtype=np.float64))
    grad = np.zeros_like(pred)
    if count == 0.0:
        return 0.0, grad
    channels = (1,) if kind.region == "foreground" else (0, 1)
    per_pixel = np.zeros(pseudo.shape, dtype=acc)
    for c in channels:
        y = pseudo if c == 1 else 1.0 - pseudo
        p = pred[..., c]
        if kind.base == "l1":
            per_pixel += np.abs(p - y)
            g = np.sign(p - y)
        elif kind.base == "l2":
            per_pixel += (p - y) ** 2
            g = 2.0 * (p - y)
        else:
            pc = np.maximum(p, CE_CLAMP)
            per_pixel -= y * np.log(pc)
            g = np.where(p > CE_CLAMP, -y / pc, 0.0)
        grad[..., c] = m * g
    # CE sums over channels (categorical); L1/L2 average them
    scale = 1.0 if kind.base == "ce" else 1.0 / len(channels)
    loss = scale * np.sum(m * per_pixel, dtype=acc) / count
    return loss, (grad * (scale / count)).astype(pred.dtype)


def consistency_loss(kind: LossKind, pred_aug, pseudo, mask, soft_target=None) -> float:
    return float(consistency_loss_and_grad(kind, pred_aug, pseudo, mask, soft_target)[0])

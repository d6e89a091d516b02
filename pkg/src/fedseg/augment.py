"""Input perturbations for consistency training and supervised augmentation.

All functions take images in [0, 1] (a single ``(H, W)`` image or an
``(N, H, W)`` batch, random draws made per image) and an explicit
``numpy.random.Generator``; nothing touches global random state.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

CUTOUT_BOX = (10, 10)  # 2-D stand-in for a 20x20x3 cube


def _batch(image):
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        return img[None], True
    if img.ndim != 3:
        raise ValueError(f"expected (H, W) or (N, H, W), got shape {img.shape}")
    return img, False


def _unbatch(img, single):
    return img[0] if single else img


def intensity_scale_shift(image, rng, magnitude: float, scale=None, shift=None):
    """``clip(a * x + b, 0, 1)`` with ``a ~ U(1-m, 1+m)``, ``b ~ U(-m, m)``.

    ``scale``/``shift`` force the draws (scalar or one value per image).
    """
    if not 0.0 < magnitude < 1.0:
        raise ValueError(f"magnitude must be in (0, 1), got {magnitude}")
    img, single = _batch(image)
    n = img.shape[0]
    a = rng.uniform(1.0 - magnitude, 1.0 + magnitude, n) if scale is None else np.broadcast_to(scale, (n,))
    b = rng.uniform(-magnitude, magnitude, n) if shift is None else np.broadcast_to(shift, (n,))
    a = np.asarray(a, np.float32)[:, None, None]
    b = np.asarray(b, np.float32)[:, None, None]
    return _unbatch(np.clip(a * img + b, 0.0, 1.0), single)


def gaussian_noise(image, rng, sigma: float):
    """Additive per-pixel ``N(0, sigma^2)`` noise, clipped to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    img, single = _batch(image)
    if sigma == 0:
        return _unbatch(img.copy(), single)
    noisy = img + rng.normal(0.0, sigma, img.shape).astype(np.float32)
    return _unbatch(np.clip(noisy, 0.0, 1.0), single)


def cutout(image, rng, count: int = 1, box_h: int = CUTOUT_BOX[0], box_w: int = CUTOUT_BOX[1],
           positions=None):
    """Zero ``count`` axis-aligned boxes per image at uniform positions.

    ``positions`` forces the top-left corners: ``count`` (row, col) pairs,
    shared by every image of a batch.
    """
    if count < 1 or box_h < 1 or box_w < 1:
        raise ValueError("count and box dimensions must be >= 1")
    img, single = _batch(image)
    n, h, w = img.shape
    if box_h > h or box_w > w:
        raise ValueError(f"box {box_h}x{box_w} larger than image {h}x{w}")
    out = img.copy()
    for i in range(n):
        if positions is None:
            rows = rng.integers(0, h - box_h + 1, count)
            cols = rng.integers(0, w - box_w + 1, count)
            corners = zip(rows, cols)
        else:
            corners = positions
        for r, c in corners:
            out[i, r:r + box_h, c:c + box_w] = 0.0
    return _unbatch(out, single)


def fixmatch_pair(image, rng, y: float, weak=None, strong=None):
    """Weak (magnitude ``y``) and strong (magnitude ``1 - y``) intensity
    scale-shift views. ``weak``/``strong`` force ``(scale, shift)``."""
    if not 0.0 < y <= 0.5:
        raise ValueError(f"y must be in (0, 0.5], got {y}")
    ws, wb = weak if weak is not None else (None, None)
    ss, sb = strong if strong is not None else (None, None)
    w = intensity_scale_shift(image, rng, y, ws, wb)
    s = intensity_scale_shift(image, rng, 1.0 - y, ss, sb)
    return w, s


def supervised_augment(patch, label, rng, shift: float = 0.1, *, flip_h=None, flip_v=None,
                       k=None, offset=None):
    """Random flips (p=0.5 each), rotation by a uniform multiple of 90
    degrees, and an additive intensity shift ``U(-shift, shift)`` on the
    patch only. Keyword overrides force the individual draws."""
    patch = np.asarray(patch, dtype=np.float32)
    label = np.asarray(label)
    if patch.shape != label.shape:
        raise ValueError(f"patch {patch.shape} and label {label.shape} differ")
    fh = rng.random() < 0.5 if flip_h is None else flip_h
    fv = rng.random() < 0.5 if flip_v is None else flip_v
    rot = int(rng.integers(0, 4)) if k is None else int(k)
    off = rng.uniform(-shift, shift) if offset is None else offset
    p, l = patch, label
    if fh:
        p, l = p[..., :, ::-1], l[..., :, ::-1]
    if fv:
        p, l = p[..., ::-1, :], l[..., ::-1, :]
    if rot % 4:
        p, l = np.rot90(p, rot, axes=(-2, -1)), np.rot90(l, rot, axes=(-2, -1))
    if off:
        p = np.clip(p + np.float32(off), 0.0, 1.0)
    return np.ascontiguousarray(p, dtype=np.float32), np.ascontiguousarray(l)


@dataclass(frozen=True)
class AugmentKind:
    """Consistency-training perturbation ``g``.

    ``variant`` is one of ``scale_shift``, ``gaussian``, ``cutout``,
    ``fixmatch`` or ``identity`` (no perturbation, for tests). Calling it returns ``(pseudo_input, pred_input)``: the view
    the pseudo-label is computed on and the view the loss is applied to.
    """

    variant: str = "scale_shift"
    magnitude: float = 0.1
    sigma: float = 0.1
    count: int = 1
    box: tuple[int, int] = CUTOUT_BOX
    y: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(self.box))
        if self.variant == "scale_shift" and not 0 < self.magnitude < 1:
            raise ValueError("magnitude must be in (0, 1)")
        elif self.variant == "gaussian" and self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        elif self.variant == "cutout" and (self.count < 1 or min(self.box) < 1):
            raise ValueError("cutout count and box must be >= 1")
        elif self.variant == "fixmatch" and not 0 < self.y <= 0.5:
            raise ValueError("y must be in (0, 0.5]")
        elif self.variant not in ("scale_shift", "gaussian", "cutout", "fixmatch", "identity"):
            raise ValueError(f"unknown augmentation {self.variant!r}")

    def __call__(self, image, rng):
        if self.variant == "identity":
            return image, image
        if self.variant == "scale_shift":
            return image, intensity_scale_shift(image, rng, self.magnitude)
        if self.variant == "gaussian":
            return image, gaussian_noise(image, rng, self.sigma)
        if self.variant == "cutout":
            return image, cutout(image, rng, self.count, *self.box)
        return fixmatch_pair(image, rng, self.y)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["box"] = list(self.box)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentKind":
        return cls(**d)


# Ablation presets; "Gauss_x" is noise of variance x.
PRESETS = {
    "scale_shift": AugmentKind("scale_shift", magnitude=0.1),
    "Gauss_0.1": AugmentKind("gaussian", sigma=float(np.sqrt(0.1))),
    "Gauss_0.9": AugmentKind("gaussian", sigma=float(np.sqrt(0.9))),
    "Cutout_1": AugmentKind("cutout", count=1),
    "Cutout_2": AugmentKind("cutout", count=5),
    "Fix_0.1": AugmentKind("fixmatch", y=0.1),
    "Fix_0.25": AugmentKind("fixmatch", y=0.25),
}

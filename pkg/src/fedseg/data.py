"""Synthetic multi-site segmentation data, windowing, patch sampling and
the FSDS dataset file.

Each image is a smooth textured background with small bright "vessel"
dots and a few soft-edged elliptical lesions. Lesion geometry comes from an
anatomy random stream and everything else from a separate appearance stream,
so two profiles that differ only in ``gain``/``offset`` give identical masks
for the same seed.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .transport import FrameError, Truncated, decode_tensor, encode_tensor

SPLITS = ("train", "valid", "test")
WINDOW = (-1000.0, 0.0)

FSDS_MAGIC = b"FSDS"
FSDS_VERSION = 1


class DatasetFormatError(FrameError):
    """Malformed FSDS file; carries the byte offset."""


@dataclass(frozen=True)
class SiteProfile:
    image_size: int = 96
    lesion_count: tuple[int, int] = (1, 3)
    radius_mean: float = 7.0
    radius_std: float = 1.5
    radius_min: float = 3.0
    contrast_mean: float = 350.0     # lesion offset over background, raw units
    contrast_std: float = 40.0
    background: float = -850.0
    texture_sigma: float = 35.0
    texture_scale: float = 2.0       # smoothing length of the texture, pixels
    noise_sigma: float = 15.0
    edge: float = 1.0                # soft-edge width, pixels
    vessel_count: tuple[int, int] = (2, 6)
    vessel_radius: float = 1.5
    vessel_contrast: float = 450.0
    mimic_count: tuple[int, int] = (0, 0)   # unlabeled lesion-like opacities
    gain: float = 1.0                # scales contrast around the background level
    offset: float = 0.0
    lesion_free_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "lesion_count", tuple(int(v) for v in self.lesion_count))
        object.__setattr__(self, "vessel_count", tuple(int(v) for v in self.vessel_count))
        object.__setattr__(self, "mimic_count", tuple(int(v) for v in self.mimic_count))
        for name in ("lesion_count", "vessel_count", "mimic_count"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must satisfy 0 <= min <= max, got {(lo, hi)}")
        if self.radius_mean <= 0 or self.radius_min <= 0 or self.radius_std < 0:
            raise ValueError("lesion radii must be positive")
        if self.image_size < 2 * self.max_radius + 4:
            raise ValueError(f"image size {self.image_size} too small for radius {self.max_radius}")
        if not 0.0 <= self.lesion_free_fraction <= 1.0:
            raise ValueError("lesion_free_fraction must be in [0, 1]")
        if self.texture_sigma < 0 or self.noise_sigma < 0 or self.edge <= 0 or self.gain <= 0:
            raise ValueError("texture/noise sigma must be >= 0, edge and gain > 0")

    @property
    def max_radius(self) -> float:
        return max(self.radius_min, self.radius_mean + 3.0 * self.radius_std)

    def expected_foreground_fraction(self) -> float:
        """Closed-form mean mask fraction ignoring lesion overlap and radius
        clipping: P(lesions) * E[count] * pi * E[r^2] / area."""
        lo, hi = self.lesion_count
        e_count = (lo + hi) / 2.0
        e_r2 = self.radius_mean ** 2 + self.radius_std ** 2
        return (1.0 - self.lesion_free_fraction) * e_count * np.pi * e_r2 / self.image_size ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("lesion_count", "vessel_count", "mimic_count"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SiteProfile":
        return cls(**d)


PROFILES = {
    "A": SiteProfile(),
    "B": SiteProfile(gain=0.55, offset=90.0),
    "C": SiteProfile(radius_mean=6.0, contrast_mean=300.0, texture_sigma=45.0, gain=0.8, offset=-40.0),
    "P": SiteProfile(lesion_free_fraction=1.0, mimic_count=(1, 3)),
    "N": SiteProfile(lesion_free_fraction=1.0),
}

# Desk-scale image counts (train, valid, test) and whether the site is labeled.
SITE_SPLITS = {
    "A": ((200, 50, 50), True),
    "B": ((30, 29, 29), False),
    "C": ((60, 15, 15), True),
    "P": ((30, 10, 10), True),
    "N": ((30, 10, 10), True),
}


def window_intensity(raw, lo: float = WINDOW[0], hi: float = WINDOW[1]) -> np.ndarray:
    """Clamp to ``[lo, hi]`` and map affinely onto [0, 1]."""
    if not lo < hi:
        raise ValueError(f"window needs lo < hi, got {lo}, {hi}")
    raw = np.asarray(raw, dtype=np.float64)
    return ((np.clip(raw, lo, hi) - lo) / (hi - lo)).astype(np.float32)


@dataclass
class SiteDataset:
    """Windowed images, raw intensities, optional labels and split tags.

    Labels are reached only through :meth:`label` / :meth:`labels_for`, so
    a wrapper can audit label access.
    """

    site: str
    images: list = field(default_factory=list)
    raws: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    splits: list = field(default_factory=list)
    profile: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.raws) == len(self.labels) == len(self.splits) == n):
            raise ValueError("images, raws, labels and splits must have equal length")
        bad = set(self.splits) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split names {sorted(bad)}")

    def __len__(self):
        return len(self.images)

    def indices(self, split: str) -> list[int]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [i for i, s in enumerate(self.splits) if s == split]

    def image(self, i: int) -> np.ndarray:
        return self.images[i]

    def label(self, i: int) -> np.ndarray:
        if self.labels[i] is None:
            raise LookupError(f"item {i} of site {self.site!r} has no label")
        return self.labels[i]

    def has_labels(self, split: str) -> bool:
        idx = self.indices(split)
        return bool(idx) and all(self.labels[i] is not None for i in idx)

    def images_for(self, split: str) -> list[np.ndarray]:
        return [self.images[i] for i in self.indices(split)]

    def labels_for(self, split: str) -> list[np.ndarray]:
        return [self.label(i) for i in self.indices(split)]

    def strip_labels(self, splits=("train", "valid")) -> "SiteDataset":
        labels = [None if s in splits else lab for lab, s in zip(self.labels, self.splits)]
        return replace(self, labels=labels)

    def equals(self, other: "SiteDataset") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is b
            return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

        return (self.site == other.site and self.splits == other.splits
                and self.profile == other.profile and len(self) == len(other)
                and all(same(a, b) for a, b in zip(self.images, other.images))
                and all(same(a, b) for a, b in zip(self.raws, other.raws))
                and all(same(a, b) for a, b in zip(self.labels, other.labels)))


def _ellipse(size, cy, cx, ry, rx, angle):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return np.sqrt(u * u + v * v)


def _soft(dist, radius, edge):
    # > 0.5 exactly where dist < 1
    return 1.0 / (1.0 + np.exp(-(1.0 - dist) * radius / edge))


def _blobs(rng, profile, count_range, radius_mean, radius_std):
    size = profile.image_size
    out = []
    count = int(rng.integers(count_range[0], count_range[1] + 1))
    for _ in range(count):
        r = float(np.clip(rng.normal(radius_mean, radius_std), profile.radius_min, profile.max_radius))
        e = float(rng.uniform(0.8, 1.25))
        ry, rx = r * e, r / e
        reach = max(ry, rx) + 1.0
        cy = float(rng.uniform(reach, size - 1 - reach))
        cx = float(rng.uniform(reach, size - 1 - reach))
        angle = float(rng.uniform(0.0, np.pi))
        out.append((_ellipse(size, cy, cx, ry, rx, angle), r))
    return out


def _render(profile: SiteProfile, anatomy, appearance):
    size = profile.image_size
    lesion_free = anatomy.random() < profile.lesion_free_fraction
    lesions = [] if lesion_free else _blobs(anatomy, profile, profile.lesion_count,
                                            profile.radius_mean, profile.radius_std)
    indicator = np.zeros((size, size))
    for dist, r in lesions:
        indicator = np.maximum(indicator, _soft(dist, r, profile.edge))
    mask = (indicator > 0.5).astype(np.uint8)

    texture = gaussian_filter(appearance.standard_normal((size, size)), profile.texture_scale)
    texture *= profile.texture_sigma / max(texture.std(), 1e-12)
    contrast = np.zeros((size, size))
    for dist, r in lesions:
        c = appearance.normal(profile.contrast_mean, profile.contrast_std)
        contrast += c * _soft(dist, r, profile.edge)
    mottle = gaussian_filter(appearance.standard_normal((size, size)), 1.5)
    contrast *= np.clip(1.0 + 0.15 * mottle / max(mottle.std(), 1e-12), 0.5, 1.5)
    for dist, r in _blobs(appearance, profile, profile.mimic_count, profile.radius_mean * 1.6,
                          profile.radius_std):
        contrast += 0.5 * profile.contrast_mean * _soft(dist, r * 1.6, 3.0 * profile.edge)
    n_vessels = int(appearance.integers(profile.vessel_count[0], profile.vessel_count[1] + 1))
    for _ in range(n_vessels):
        cy, cx = appearance.uniform(2, size - 3, 2)
        d = _ellipse(size, cy, cx, profile.vessel_radius, profile.vessel_radius, 0.0)
        contrast += profile.vessel_contrast * _soft(d, profile.vessel_radius, 0.5)
    detail = texture + contrast
    raw = profile.background + profile.offset + profile.gain * detail
    raw = raw + appearance.normal(0.0, profile.noise_sigma, (size, size))
    return raw.astype(np.float32), mask


def _split_counts(n, split):
    if split is None:
        n_val = n_test = int(round(0.15 * n))
        return n - n_val - n_test, n_val, n_test
    split = tuple(int(v) for v in split)
    if len(split) != 3 or min(split) < 0 or sum(split) != n:
        raise ValueError(f"split counts {split} must be 3 non-negative values summing to {n}")
    return split


def generate_site(profile: SiteProfile, n_images: int, seed: int, *, split=None,
                  labeled: bool = True, site: str = "site") -> SiteDataset:
    """Render ``n_images`` images and assign them to train/valid/test.

    ``split`` gives the three counts (default 70/15/15). With
    ``labeled=False`` train and valid labels are dropped; test labels stay
    for evaluation.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    counts = _split_counts(n_images, split)
    root = np.random.SeedSequence(int(seed))
    split_seq, *item_seqs = root.spawn(n_images + 1)
    images, raws, labels = [], [], []
    for seq in item_seqs:
        anat, appear = (np.random.default_rng(s) for s in seq.spawn(2))
        raw, mask = _render(profile, anat, appear)
        raws.append(raw)
        images.append(window_intensity(raw))
        labels.append(mask)
    order = np.random.default_rng(split_seq).permutation(n_images)
    splits = [""] * n_images
    names = ["train"] * counts[0] + ["valid"] * counts[1] + ["test"] * counts[2]
    for name, i in zip(names, order):
        splits[i] = name
    ds = SiteDataset(site, images, raws, labels, splits, profile.to_dict())
    return ds if labeled else ds.strip_labels()


def make_site(name: str, seed: int, profile: SiteProfile | None = None, counts=None,
              labeled=None) -> SiteDataset:
    """Preset site ``A``/``B``/``C``/``P``/``N`` with its split sizes."""
    if name not in PROFILES:
        raise ValueError(f"unknown site preset {name!r}; choose from {sorted(PROFILES)}")
    default_counts, default_labeled = SITE_SPLITS[name]
    counts = tuple(counts or default_counts)
    return generate_site(profile or PROFILES[name], sum(counts), seed, split=counts,
                         labeled=default_labeled if labeled is None else labeled, site=name)


# -- patch sampling ---------------------------------------------------------------

def sample_patch(volume, label, crop, rng, balanced: bool = True, return_center: bool = False):
    """Crop a training patch.

    Balanced sampling centres the crop on a uniformly chosen foreground
    pixel with probability 0.5, else on a background pixel; a mask without
    one of the classes uses the class present, and an unlabeled image
    (``label is None``) or an empty mask gets a uniform crop. The crop is
    clipped to the image.
    """
    img = np.asarray(volume)
    ch, cw = (crop, crop) if np.isscalar(crop) else tuple(crop)
    H, W = img.shape[:2]
    if ch > H or cw > W:
        raise ValueError(f"crop {(ch, cw)} larger than image {(H, W)}")
    center = None
    if balanced and label is not None:
        lab = np.asarray(label)
        fg = np.flatnonzero(lab.ravel())
        if fg.size:
            want_fg = rng.random() < 0.5
            pool = fg
            if not want_fg:
                bg = np.flatnonzero(lab.ravel() == 0)
                pool = bg if bg.size else fg
            k = int(pool[rng.integers(0, pool.size)])
            center = divmod(k, W)
    if center is None:
        top, left = int(rng.integers(0, H - ch + 1)), int(rng.integers(0, W - cw + 1))
        center = (top + ch // 2, left + cw // 2)
    else:
        top = int(np.clip(center[0] - ch // 2, 0, H - ch))
        left = int(np.clip(center[1] - cw // 2, 0, W - cw))
    patch = img[top:top + ch, left:left + cw]
    lp = None if label is None else np.asarray(label)[top:top + ch, left:left + cw]
    if return_center:
        return patch, lp, center
    return patch, lp


# -- FSDS file ------------------------------------------------------------------------

def save_dataset(ds: SiteDataset, path) -> None:
    """Write ``path`` (FSDS) plus ``path + '.json'`` (profile and splits)."""
    blobs, items, pos = [], [], 0
    for i in range(len(ds)):
        entry = {"split": ds.splits[i]}
        for key, arr in (("image", ds.images[i]), ("raw", ds.raws[i]), ("label", ds.labels[i])):
            if arr is None:
                continue
            rec = encode_tensor(f"{key}{i}", arr)
            entry[key] = [pos, len(rec)]
            blobs.append(rec)
            pos += len(rec)
        items.append(entry)
    header = {"site": ds.site, "profile": ds.profile, "count": len(ds), "items": items,
              "splits": {s: ds.indices(s) for s in SPLITS}}
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(FSDS_MAGIC + struct.pack("<BI", FSDS_VERSION, len(raw_header)) + raw_header)
        for b in blobs:
            f.write(b)
    sidecar = {"site": ds.site, "profile": ds.profile, "count": len(ds),
               "splits": header["splits"]}
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def parse_dataset(buf: bytes) -> SiteDataset:
    if len(buf) < 4 or buf[:4] != FSDS_MAGIC:
        raise DatasetFormatError("bad magic", 0)
    if len(buf) < 9:
        raise DatasetFormatError("truncated header", len(buf))
    version, hlen = struct.unpack_from("<BI", buf, 4)
    if version != FSDS_VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    if 9 + hlen > len(buf):
        raise DatasetFormatError(f"header declares {hlen} bytes, {len(buf) - 9} available", len(buf))
    try:
        header = json.loads(buf[9:9 + hlen].decode("utf-8"))
        items = header["items"]
        count = int(header["count"])
        site, profile = header["site"], header["profile"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError):
        raise DatasetFormatError("malformed JSON header", 9) from None
    if not isinstance(items, list) or len(items) != count:
        raise DatasetFormatError("item table does not match count", 9)
    base = 9 + hlen
    images, raws, labels, splits = [], [], [], []
    try:
        for i, entry in enumerate(items):
            split = entry["split"]
            if split not in SPLITS:
                raise DatasetFormatError(f"item {i} has unknown split {split!r}", 9)
            splits.append(split)
            for key, dest in (("image", images), ("raw", raws), ("label", labels)):
                if key not in entry:
                    if key != "label":
                        raise DatasetFormatError(f"item {i} lacks {key}", 9)
                    dest.append(None)
                    continue
                off, length = (int(v) for v in entry[key])
                start, stop = base + off, base + off + length
                if off < 0 or length < 0 or stop > len(buf):
                    raise DatasetFormatError(f"item {i} {key} record runs past end of file",
                                             min(start, len(buf)))
                _, arr, end = decode_tensor(buf, start, stop)
                if end != stop:
                    raise DatasetFormatError(f"item {i} {key} record length mismatch", end)
                dest.append(arr)
    except DatasetFormatError:
        raise
    except FrameError as e:
        raise DatasetFormatError(str(e).rsplit(" (byte offset", 1)[0], e.offset) from None
    except (KeyError, TypeError, ValueError):
        raise DatasetFormatError("malformed item table", 9) from None
    try:
        return SiteDataset(site, images, raws, labels, splits, profile)
    except ValueError as e:
        raise DatasetFormatError(str(e), 9) from None


def load_dataset(path) -> SiteDataset:
    with open(path, "rb") as f:
        return parse_dataset(f.read())


__all__ = ["SiteProfile", "SiteDataset", "PROFILES", "SITE_SPLITS", "generate_site", "make_site",
           "window_intensity", "sample_patch", "save_dataset", "load_dataset", "parse_dataset",
           "DatasetFormatError", "Truncated"]

"""U-shape FCN construction, parameter snapshots and full-image inference."""
from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from .autodiff import Graph, Node, calibrate_norms, forward
from .params import ParamSet, ShareFilter, apply_delta, subtract  # noqa: F401  (re-exported)

# Desk-scale stand-ins for the 3-D sizes (training crop, inference window, sliding step).
PATCH_SIZE = (64, 64)          # 160x160x32 training crop
INFER_WINDOW = (96, 96)        # 224x224x32 inference crop
INFER_STRIDE = 32              # sliding step 16


@dataclass(frozen=True)
class ModelConfig:
    patch: tuple[int, int] = PATCH_SIZE
    depth: int = 5
    base_channels: int = 8
    channels: tuple[int, ...] | None = None
    convs_per_block: int = 2
    in_channels: int = 1
    leaky_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(v) for v in self.patch))
        if self.channels is not None:
            object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.channels is not None and len(self.channels) != self.depth:
            raise ValueError(f"need {self.depth} channel counts, got {len(self.channels)}")
        m = self.multiple
        if self.patch[0] % m or self.patch[1] % m:
            raise ValueError(f"patch {self.patch} not divisible by 2^(depth-1) = {m}")
        if self.convs_per_block < 1 or self.base_channels < 1:
            raise ValueError("convs_per_block and base_channels must be positive")

    @property
    def multiple(self) -> int:
        return 2 ** (self.depth - 1)

    @property
    def level_channels(self) -> tuple[int, ...]:
        """Channels per encoder level; defaults to base * 2^k capped at 4 * base."""
        if self.channels is not None:
            return self.channels
        b = self.base_channels
        return tuple(min(b * 2 ** k, 4 * b) for k in range(self.depth))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        d["channels"] = list(self.channels) if self.channels is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("channels") is not None:
            d["channels"] = tuple(d["channels"])
        d["patch"] = tuple(d.get("patch", PATCH_SIZE))
        return cls(**d)


def block_layout(config: ModelConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    """(block name, stage tag, shape) for every parameter block, in graph order."""
    ch = config.level_channels
    d = config.depth
    out = []

    def unit(prefix, tag, cin, cout):
        for u in range(config.convs_per_block):
            out.append((f"{prefix}.conv{u + 1}.weight", tag, (cout, cin if u == 0 else cout, 3, 3)))
            out.append((f"{prefix}.conv{u + 1}.bias", tag, (cout,)))

    cin = config.in_channels
    for k in range(1, d + 1):
        unit(f"enc{k}", f"encoder{k}", cin, ch[k - 1])
        cin = ch[k - 1]
    for k in range(d + 1, 2 * d + 1):
        skip = 2 * d - k
        skip_ch = ch[skip - 1] if skip >= 1 else config.in_channels
        cout = ch[skip - 1] if skip >= 1 else ch[0]
        unit(f"dec{k}", f"decoder{k}", cin + skip_ch, cout)
        cin = cout
    out.append(("final.weight", "final", (2, cin, 1, 1)))
    out.append(("final.bias", "final", (2,)))
    return out


def param_count(config: ModelConfig) -> int:
    return int(sum(np.prod(shape) for _, _, shape in block_layout(config)))


def build_model(config: ModelConfig, seed: int = 0) -> tuple[Graph, ParamSet]:
    """Build the graph and a seeded He-initialised ParamSet.

    Decoder stage k (k = depth+1 .. 2*depth) upsamples the previous stage
    and concatenates encoder stage 2*depth - k; the last decoder stage sits
    at full resolution and takes the network input itself as its skip.
    Normalization statistics are frozen from one seeded calibration batch.
    """
    rng = np.random.default_rng(seed)
    layout = block_layout(config)
    blocks, stages = {}, {}
    for name, tag, shape in layout:
        if name.endswith("bias"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        blocks[name] = arr
        stages[name] = tag
    params = ParamSet(blocks, stages)

    nodes: list[Node] = [Node("input", name="input")]

    def add(op, inputs, prm=(), name="", **attrs):
        nodes.append(Node(op, tuple(inputs), tuple(prm), attrs, name))
        return len(nodes) - 1

    def unit(prefix, x):
        for u in range(config.convs_per_block):
            p = f"{prefix}.conv{u + 1}"
            x = add("conv2d", [x], [f"{p}.weight"], f"{p}")
            x = add("norm", [x], name=f"{p}.norm", mean=None, inv_std=None)
            x = add("bias", [x], [f"{p}.bias"], f"{p}.bias")
            x = add("leaky", [x], name=f"{p}.act", slope=config.leaky_slope)
        return x

    d = config.depth
    enc_out = {0: 0}
    x = 0
    for k in range(1, d + 1):
        if k > 1:
            x = add("down2", [x], name=f"enc{k}.down")
        x = unit(f"enc{k}", x)
        enc_out[k] = x
    for k in range(d + 1, 2 * d + 1):
        skip = 2 * d - k
        if skip >= 1:
            x = add("up2", [x], name=f"dec{k}.up")
        x = add("concat", [x, enc_out[skip]], name=f"dec{k}.skip")
        x = unit(f"dec{k}", x)
    x = add("conv2d", [x], ["final.weight"], "final")
    x = add("bias", [x], ["final.bias"], "final.bias")
    add("softmax", [x], name="softmax")

    graph = Graph(tuple(nodes), config.in_channels, config.multiple)
    calib = rng.uniform(0.0, 1.0, (2, *config.patch, config.in_channels))
    calibrate_norms(graph, params, calib)
    return graph, params


def as_batch(image: np.ndarray) -> np.ndarray:
    """(H,W) -> (1,H,W,1); (N,H,W) -> (N,H,W,1); NHWC passes through."""
    a = np.asarray(image)
    if a.ndim == 2:
        return a[None, :, :, None]
    if a.ndim == 3:
        return a[..., None]
    return a


def window_starts(size: int, window: int, stride: int) -> list[int]:
    """Window offsets along one axis; the last window is flush with the edge."""
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] + window < size:
        starts.append(size - window)
    return starts


def infer_full(graph: Graph, params, image: np.ndarray, window=INFER_WINDOW,
               stride: int = INFER_STRIDE, batch: int = 8) -> np.ndarray:
    """Sliding-window probability map (H, W, 2) for one 2-D image.

    Overlapping window predictions are averaged uniformly per pixel.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    wh, ww = (window, window) if np.isscalar(window) else tuple(window)
    if stride <= 0 or stride > min(wh, ww):
        raise ValueError(f"stride must be in [1, {min(wh, ww)}], got {stride}")
    H, W = img.shape
    if H < wh or W < ww:
        raise ValueError(f"image {img.shape} smaller than window {(wh, ww)}")
    coords = [(r, c) for r in window_starts(H, wh, stride) for c in window_starts(W, ww, stride)]
    acc = np.zeros((H, W, 2), dtype=np.float64)
    cnt = np.zeros((H, W, 1), dtype=np.float64)
    for i in range(0, len(coords), batch):
        chunk = coords[i:i + batch]
        x = np.stack([img[r:r + wh, c:c + ww] for r, c in chunk])[..., None]
        prob = forward(graph, params, x, keep=False).output
        for (r, c), p in zip(chunk, prob):
            acc[r:r + wh, c:c + ww] += p
            cnt[r:r + wh, c:c + ww] += 1.0
    return (acc / cnt).astype(np.float32)


def predict_images(graph: Graph, params, images, window=INFER_WINDOW, stride: int = INFER_STRIDE,
                   batch: int = 8) -> list[np.ndarray]:
    """Probability maps for a list of 2-D images; images the size of the
    window are batched through single forward passes."""
    wh, ww = (window, window) if np.isscalar(window) else tuple(window)
    out: list = [None] * len(images)
    whole = [i for i, im in enumerate(images) if np.shape(im) == (wh, ww)]
    for s in range(0, len(whole), batch):
        chunk = whole[s:s + batch]
        x = np.stack([np.asarray(images[i], np.float32) for i in chunk])[..., None]
        prob = forward(graph, params, x, keep=False).output
        for i, p in zip(chunk, prob):
            out[i] = p
    for i, im in enumerate(images):
        if out[i] is None:
            out[i] = infer_full(graph, params, im, window, stride, batch)
    return out

"""Static-graph reverse-mode autodiff over NHWC numpy arrays.

The primitive set is deliberately small: 2-D convolution (3x3 "same" or
1x1), per-channel bias, leaky ReLU, 2x average downsampling, 2x nearest
upsampling, channel concatenation, frozen per-channel normalization and a
softmax over channels. Graphs are immutable node lists evaluated in index
order, so evaluation order is deterministic by construction.
"""
from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

OPS = ("input", "conv2d", "bias", "leaky", "down2", "up2", "concat", "norm", "softmax")


class ShapeError(ValueError):
    """Tensor shapes do not fit the graph; the message names the node."""


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...] = ()
    params: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict, hash=False, compare=False)
    name: str = ""


@dataclass(frozen=True, eq=False)
class Graph:
    """Acyclic node list; node 0 is the input, the last node the output."""

    nodes: tuple[Node, ...]
    in_channels: int
    multiple: int = 1

    def __post_init__(self):
        if not self.nodes or self.nodes[0].op != "input":
            raise ValueError("graph must start with an input node")
        for i, node in enumerate(self.nodes):
            if node.op not in OPS:
                raise ValueError(f"unknown op {node.op!r} at node {i}")
            if any(j >= i or j < 0 for j in node.inputs):
                raise ValueError(f"node {i} ({node.name}) breaks topological order")

    @property
    def param_names(self) -> list[str]:
        seen = {}
        for node in self.nodes:
            for p in node.params:
                seen.setdefault(p, None)
        return list(seen)

    def first_use(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for i, node in enumerate(self.nodes):
            for p in node.params:
                out.setdefault(p, i)
        return out

    def leaky_nodes(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "leaky"]


_activation_ids = itertools.count()


@dataclass
class Activations:
    """Per-node outputs of one forward pass plus what backward needs."""

    graph: Graph
    params: dict[str, np.ndarray]
    values: list[np.ndarray]
    saved: dict[int, object]
    token: int = field(default_factory=lambda: next(_activation_ids))

    @property
    def output(self) -> np.ndarray:
        return self.values[-1]

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def leaky_masks(self) -> dict[int, np.ndarray]:
        return {i: self.saved[i] for i in self.graph.leaky_nodes() if i in self.saved}


# -- primitive ops ------------------------------------------------------------

def _im2col(x, k):
    n, h, wd, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n,h,w,c,k,k
    return win.reshape(n * h * wd, c * k * k)


def _conv_fwd(x, w, keep):
    n, h, wd, c = x.shape
    cout, cin, k, _ = w.shape
    if cin != c:
        raise ShapeError(f"expected {cin} input channels, got {c}")
    if k == 1:
        return (x.reshape(-1, c) @ w.reshape(cout, cin).T).reshape(n, h, wd, cout), None
    if c < 4:
        cols = _im2col(x, k)
        out = (cols @ w.reshape(cout, -1).T).reshape(n, h, wd, cout)
        return out, (cols if keep else None)
    # multiply every padded pixel by all k*k taps at once, then shift-add the taps
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    taps = xp.reshape(-1, c) @ w.transpose(1, 2, 3, 0).reshape(c, k * k * cout)
    taps = taps.reshape(n, h + 2 * p, wd + 2 * p, k, k, cout)
    out = taps[:, :h, :wd, 0, 0].copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                out += taps[:, i:i + h, j:j + wd, i, j]
    return out, None


def _conv_bwd(dout, x, w, cols):
    cout, cin, k, _ = w.shape
    d2 = dout.reshape(-1, cout)
    if k == 1:
        dw = (d2.T @ x.reshape(-1, cin)).reshape(w.shape)
        return (d2 @ w.reshape(cout, cin)).reshape(x.shape), dw
    if cols is not None:
        dw = (d2.T @ cols).reshape(w.shape)
    else:
        n, h, wd, _ = x.shape
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        dw = np.empty_like(w)
        for i in range(k):
            for j in range(k):
                dw[:, :, i, j] = d2.T @ xp[:, i:i + h, j:j + wd, :].reshape(-1, cin)
    # input gradient of a "same" correlation = correlation with the flipped kernel
    w_flip = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    return _conv_fwd(dout, w_flip, False)[0], dw


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _eval_node(i, node, ins, prm, keep, frozen):
    """Returns (output, saved-for-backward)."""
    op = node.op
    if op == "conv2d":
        return _conv_fwd(ins[0], prm[0], keep)
    if op == "bias":
        b = prm[0]
        if b.shape != (ins[0].shape[-1],):
            raise ShapeError(f"bias of shape {b.shape} for {ins[0].shape[-1]} channels")
        return ins[0] + b, None
    if op == "leaky":
        x = ins[0]
        mask = frozen[i] if frozen is not None and i in frozen else x > 0
        slope = x.dtype.type(node.attrs.get("slope", 0.01))
        return np.where(mask, x, x * slope), mask
    if op == "down2":
        x = ins[0]
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"cannot downsample odd spatial size {h}x{w}")
        return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4)), None
    if op == "up2":
        return ins[0].repeat(2, axis=1).repeat(2, axis=2), None
    if op == "concat":
        if len({a.shape[:3] for a in ins}) != 1:
            raise ShapeError(f"cannot concatenate {[a.shape for a in ins]}")
        return np.concatenate(ins, axis=-1), None
    if op == "norm":
        mean = node.attrs.get("mean")
        if mean is None:
            raise ShapeError("normalization statistics not calibrated")
        x = ins[0]
        if x.shape[-1] != len(mean):
            raise ShapeError(f"normalization over {len(mean)} channels, got {x.shape[-1]}")
        return (x - mean.astype(x.dtype)) * node.attrs["inv_std"].astype(x.dtype), None
    if op == "softmax":
        y = _softmax(ins[0])
        return y, y
    raise ShapeError(f"cannot evaluate op {op!r}")


def _grad_node(node, dout, ins, prm, saved):
    """Returns (input grads, param grads)."""
    op = node.op
    if op == "conv2d":
        dx, dw = _conv_bwd(dout, ins[0], prm[0], saved)
        return [dx], [dw]
    if op == "bias":
        return [dout], [dout.sum(axis=(0, 1, 2))]
    if op == "leaky":
        slope = dout.dtype.type(node.attrs.get("slope", 0.01))
        return [np.where(saved, dout, dout * slope)], []
    if op == "down2":
        d = dout.repeat(2, axis=1).repeat(2, axis=2) * dout.dtype.type(0.25)
        return [d], []
    if op == "up2":
        n, h, w, c = dout.shape
        return [dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))], []
    if op == "concat":
        cuts = np.cumsum([a.shape[-1] for a in ins])[:-1]
        return list(np.split(dout, cuts, axis=-1)), []
    if op == "norm":
        return [dout * node.attrs["inv_std"].astype(dout.dtype)], []
    if op == "softmax":
        y = saved
        return [y * (dout - (dout * y).sum(axis=-1, keepdims=True))], []
    raise ShapeError(f"cannot differentiate op {op!r}")


# -- public evaluation ----------------------------------------------------------

def _check_input(graph: Graph, x: np.ndarray):
    if x.ndim != 4:
        raise ShapeError(f"node 0 (input): expected NHWC array, got shape {x.shape}")
    if x.shape[-1] != graph.in_channels:
        raise ShapeError(f"node 0 (input): expected {graph.in_channels} channels, got {x.shape[-1]}")
    if x.shape[1] % graph.multiple or x.shape[2] % graph.multiple:
        raise ShapeError(
            f"node 0 (input): spatial size {x.shape[1]}x{x.shape[2]} "
            f"not divisible by {graph.multiple}")


def forward(graph: Graph, params: Mapping[str, np.ndarray], x: np.ndarray, *,
            dtype=None, keep: bool = True, frozen: Mapping[int, np.ndarray] | None = None,
            reuse: Activations | None = None, start: int = 1) -> Activations:
    """Evaluate ``graph`` on NHWC input ``x``.

    ``dtype`` casts input and parameters (float64 gives the shadow mode used
    by the gradient oracles). ``frozen`` pins the leaky-ReLU sign pattern per
    node. With ``reuse`` only nodes from index ``start`` on are recomputed.
    """
    dtype = np.dtype(dtype or np.float32)
    prm = {n: np.asarray(params[n], dtype=dtype) for n in graph.param_names}
    if reuse is None or start <= 0:
        x = np.asarray(x, dtype=dtype)
        _check_input(graph, x)
        values, saved, start = [x], {}, 1
    else:
        values, saved = list(reuse.values[:start]), {k: v for k, v in reuse.saved.items() if k < start}
    for i in range(start, len(graph.nodes)):
        node = graph.nodes[i]
        try:
            out, s = _eval_node(i, node, [values[j] for j in node.inputs],
                                [prm[p] for p in node.params], keep, frozen)
        except ShapeError as e:
            raise ShapeError(f"node {i} ({node.name or node.op}): {e}") from None
        values.append(out)
        if s is not None and (keep or node.op == "leaky"):
            saved[i] = s
    if not np.isfinite(values[-1]).all():
        raise FloatingPointError("forward produced non-finite output")
    return Activations(graph, prm, values, saved)


def backward(graph: Graph, acts: Activations, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * output)`` w.r.t. every parameter block."""
    if acts.graph is not graph or len(acts.values) != len(graph.nodes):
        raise ValueError("activations were not produced by this graph")
    upstream = np.asarray(upstream, dtype=acts.output.dtype)
    if upstream.shape != acts.output.shape:
        raise ShapeError(f"upstream gradient shape {upstream.shape} != output {acts.output.shape}")
    grads_act: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads_act[-1] = upstream
    pgrads = {n: np.zeros_like(acts.params[n]) for n in graph.param_names}
    for i in range(len(graph.nodes) - 1, 0, -1):
        dout = grads_act[i]
        if dout is None:
            continue
        node = graph.nodes[i]
        if node.op in ("softmax", "leaky") and i not in acts.saved:
            raise ValueError(f"node {i}: activations lack saved state (forward ran with keep=False)")
        ins = [acts.values[j] for j in node.inputs]
        dins, dps = _grad_node(node, dout, ins, [acts.params[p] for p in node.params],
                               acts.saved.get(i))
        for j, d in zip(node.inputs, dins):
            grads_act[j] = d if grads_act[j] is None else grads_act[j] + d
        for p, d in zip(node.params, dps):
            pgrads[p] += d
        grads_act[i] = None
    for n, g in pgrads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in block {n!r}")
    return pgrads


def calibrate_norms(graph: Graph, params: Mapping[str, np.ndarray], x: np.ndarray,
                    eps: float = 1e-5) -> None:
    """Freeze per-channel statistics of every uncalibrated norm node from one
    pass over ``x``. Mutates the node attrs in place; called once at build."""
    x = np.asarray(x, dtype=np.float64)
    prm = {n: np.asarray(params[n], dtype=np.float64) for n in graph.param_names}
    values = [x]
    for i in range(1, len(graph.nodes)):
        node = graph.nodes[i]
        ins = [values[j] for j in node.inputs]
        if node.op == "norm" and node.attrs.get("mean") is None:
            a = ins[0]
            node.attrs["mean"] = a.mean(axis=(0, 1, 2)).astype(np.float32)
            node.attrs["inv_std"] = (1.0 / np.sqrt(a.var(axis=(0, 1, 2)) + eps)).astype(np.float32)
        values.append(_eval_node(i, node, ins, [prm[p] for p in node.params], False, None)[0])


# -- gradient checking -----------------------------------------------------------

LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_block: str
    per_block: dict[str, float]
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def flagged(self) -> list[str]:
        return [n for n, e in self.per_block.items() if e >= self.tolerance]


def _softmax_wide(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _stencil(f, h):
    # differences first, so equal evaluations give exactly zero
    return (8 * (f[2] - f[1]) - (f[3] - f[0])) / (12 * h)


def finite_difference_gradients(graph: Graph, params: Mapping[str, np.ndarray], x: np.ndarray,
                                loss_fn: LossFn, *, h: float = 1e-4, max_exhaustive: int = 20_000,
                                per_block: int = 4, seed: int = 0,
                                wide=np.longdouble) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Fourth-order central differences: ``name -> (flat indices, values)``.

    Evaluated on the leaky sign pattern of the unperturbed float64 pass, so
    a perturbation that crosses a kink cannot corrupt the reference. Under
    that pattern the logits are affine in any single parameter; when the
    graph ends in a softmax, the logit direction is measured with two
    float64 passes (and checked for affinity) and the stencil runs on the
    loss of ``softmax(z0 + s * a)`` in ``wide`` precision. Otherwise every
    stencil point is a full float64 pass. Models with more than
    ``max_exhaustive`` values get ``per_block`` random coordinates per block.
    """
    base = forward(graph, params, x, dtype=np.float64, keep=False)
    frozen = base.leaky_masks()
    loss0, _ = loss_fn(base.output)
    if not np.isfinite(loss0):
        raise FloatingPointError("loss is not finite")
    names = graph.param_names
    exhaustive = sum(np.asarray(params[n]).size for n in names) <= max_exhaustive
    rng = np.random.default_rng(seed)
    first = graph.first_use()
    p64 = {n: np.array(params[n], dtype=np.float64) for n in names}
    last = graph.nodes[-1]
    z_at = last.inputs[0] if last.op == "softmax" else None
    z0 = base.values[z_at].astype(wide) if z_at is not None else None
    steps = (-2 * h, -h, h, 2 * h)

    def perturbed(name):
        return forward(graph, p64, x, dtype=np.float64, keep=False, frozen=frozen,
                       reuse=base, start=first[name])

    def checked(val):
        val = float(val)
        if not np.isfinite(val):
            raise FloatingPointError("loss is not finite under perturbation")
        return val

    out = {}
    for name in names:
        flat = p64[name].reshape(-1)
        if exhaustive or flat.size <= per_block:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=per_block, replace=False))
        vals = np.empty(len(idx))
        for t, k in enumerate(idx):
            orig = flat[k]
            if z_at is not None:
                flat[k] = orig + 1.0
                zp = perturbed(name).values[z_at]
                flat[k] = orig - 1.0
                zm = perturbed(name).values[z_at]
                flat[k] = orig
                z0_64 = base.values[z_at]
                curvature = np.abs(zp + zm - 2 * z0_64).max()
                if curvature <= 1e-9 * (1.0 + np.abs(z0_64).max()):
                    a = (zp.astype(wide) - zm.astype(wide)) / 2
                    f = [loss_fn(_softmax_wide(z0 + wide(s) * a))[0] for s in steps]
                    checked(f[0])
                    vals[t] = float(_stencil(f, wide(h)))
                    continue
            f = []
            for step in steps:
                flat[k] = orig + step
                f.append(checked(loss_fn(perturbed(name).output)[0]))
            flat[k] = orig
            vals[t] = _stencil(f, h)
        out[name] = (idx, vals)
    return out


def grad_check(graph: Graph, params: Mapping[str, np.ndarray], x: np.ndarray, loss_fn: LossFn,
               tolerance: float = 1e-3, *, dtype=np.float32, h: float = 1e-4,
               max_exhaustive: int = 20_000, per_block: int = 4, seed: int = 0,
               grads: Mapping[str, np.ndarray] | None = None,
               reference: dict | None = None) -> GradCheckReport:
    """Compare analytic gradients (computed in ``dtype``) against finite
    differences; per block, the max of ``|g - g_fd| / max(|g_fd|, 1e-8)``.

    ``grads`` overrides the analytic gradients (fault injection);
    ``reference`` reuses a :func:`finite_difference_gradients` result.
    """
    if reference is None:
        reference = finite_difference_gradients(graph, params, x, loss_fn, h=h,
                                                max_exhaustive=max_exhaustive,
                                                per_block=per_block, seed=seed)
    if grads is None:
        frozen = forward(graph, params, x, dtype=np.float64, keep=False).leaky_masks()
        acts = forward(graph, params, x, dtype=dtype, frozen=frozen)
        loss, dout = loss_fn(acts.output)
        if not np.isfinite(loss):
            raise FloatingPointError("loss is not finite")
        grads = backward(graph, acts, dout)
    per: dict[str, float] = {}
    checked = 0
    for name, (idx, g_fd) in reference.items():
        g_an = np.asarray(grads[name], dtype=np.float64).reshape(-1)[idx]
        err = np.abs(g_an - g_fd) / np.maximum(np.abs(g_fd), 1e-8)
        per[name] = float(err.max()) if len(err) else 0.0
        checked += len(idx)
    worst_block = max(per, key=per.get) if per else ""
    return GradCheckReport(per.get(worst_block, 0.0), worst_block, per, checked, tolerance)


# -- optimizers --------------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(state: OptimizerState, params: Mapping[str, np.ndarray],
                   grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    """One SGD or bias-corrected Adam step; Adam moments live in ``state``."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for n in params:
        if n not in grads or np.shape(grads[n]) != np.shape(params[n]):
            raise ShapeError(f"gradient for block {n!r} missing or mis-shaped")
    state.step += 1
    out = {}
    if state.kind == "sgd":
        for n, p in params.items():
            out[n] = p - p.dtype.type(lr) * np.asarray(grads[n], dtype=p.dtype)
        return out
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for n, p in params.items():
        g = np.asarray(grads[n], dtype=p.dtype)
        m = state.m.get(n)
        v = state.v.get(n)
        if m is None or m.shape != p.shape or m.dtype != p.dtype:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = p.dtype.type(b1) * m + p.dtype.type(1 - b1) * g
        v = p.dtype.type(b2) * v + p.dtype.type(1 - b2) * g * g
        state.m[n], state.v[n] = m, v
        mhat = m / p.dtype.type(c1)
        vhat = v / p.dtype.type(c2)
        out[n] = p - p.dtype.type(lr) * mhat / (np.sqrt(vhat) + p.dtype.type(state.eps))
    return out

"""Federated clients: supervised Dice training, consistency training on
unlabeled images, local evaluation and the client side of the protocol."""
from __future__ import annotations

import copy
import warnings
from collections import deque
from dataclasses import dataclass, field, asdict

import numpy as np

from .augment import PRESETS as AUGMENT_PRESETS, AugmentKind, supervised_augment
from .autodiff import Graph, OptimizerState, backward, forward, optimizer_step
from .data import SiteDataset, sample_patch
from .losses import (DEFAULT_KIND, LossKind, confidence_mask, consistency_loss_and_grad,
                     make_pseudo_label, supervised_loss_and_grad)
from .model import INFER_STRIDE, INFER_WINDOW, PATCH_SIZE, ModelConfig, predict_images
from .params import ParamSet, ShareFilter, subtract
from .runtime import compute_slot
from .transport import Kind, Message, SessionClosed

SUPERVISED_LR = 1e-4
UNSUPERVISED_LR = 5e-6
TRACE_LEN = 100
STARVED_FRACTION = 0.95
ROLES = ("supervised", "unsupervised")


@dataclass
class ClientSpec:
    client_id: str
    role: str = "supervised"
    lr: float | None = None              # None: role default
    weight: float = 1.0
    iterations_per_epoch: int = 20
    epochs_per_round: int | None = None  # None: the server's schedule
    loss: LossKind = DEFAULT_KIND
    augment: AugmentKind = AUGMENT_PRESETS["scale_shift"]
    tau: float = 0.9
    optimizer: str = "adam"
    dataset: str | None = None           # site preset name or FSDS path
    seed: int | None = None              # seed key; defaults to the client id
    batch_size: int = 4
    balanced: bool = True

    def __post_init__(self):
        if isinstance(self.loss, str):
            self.loss = LossKind.parse(self.loss)
        if isinstance(self.augment, str):
            self.augment = AUGMENT_PRESETS[self.augment]
        elif isinstance(self.augment, dict):
            self.augment = AugmentKind.from_dict(self.augment)
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.lr is None:
            self.lr = SUPERVISED_LR if self.role == "supervised" else UNSUPERVISED_LR
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.weight < 0:
            raise ValueError("aggregation weight must be >= 0")
        if not 0.5 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0.5, 1]")
        if self.iterations_per_epoch < 0 or self.batch_size < 1:
            raise ValueError("iterations_per_epoch must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def supervised(self) -> bool:
        return self.role == "supervised"

    @property
    def seed_key(self):
        return self.client_id if self.seed is None else self.seed

    def iterations(self, epochs: int | None = None) -> int:
        e = self.epochs_per_round if self.epochs_per_round is not None else epochs
        return self.iterations_per_epoch * (1 if e is None else int(e))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.name
        d["augment"] = self.augment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClientSpec":
        d = dict(d)
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossKind(**d["loss"])
        return cls(**d)


@dataclass
class DeltaReport:
    client_id: str
    round: int
    n: int
    delta: ParamSet | None
    losses: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    valid_dice: float | None = None
    test_dice: float | None = None

    def to_message(self) -> Message:
        meta = {"n": self.n, "losses": [float(v) for v in self.losses], "warnings": list(self.warnings)}
        if self.valid_dice is not None:
            meta["valid_dice"] = float(self.valid_dice)
        if self.test_dice is not None:
            meta["test_dice"] = float(self.test_dice)
        params = None if self.delta is None else dict(self.delta.items())
        return Message(Kind.DELTA_SUBMISSION, self.round, self.client_id, meta, params)

    @classmethod
    def from_message(cls, msg: Message, stages: dict) -> "DeltaReport":
        delta = None
        if msg.params is not None:
            delta = ParamSet(msg.params, {n: stages[n] for n in msg.params})
        m = msg.meta
        return cls(msg.client_id, msg.round, int(m.get("n", 0)), delta, list(m.get("losses", [])),
                   list(m.get("warnings", [])), m.get("valid_dice"), m.get("test_dice"))


# -- updates ---------------------------------------------------------------------------

def _check_iterations(spec, epochs):
    n = spec.iterations(epochs)
    if n <= 0:
        raise ValueError(f"client {spec.client_id}: iteration count must be > 0, got {n}")
    return n


def _finite(loss, spec, round_index, j):
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"client {spec.client_id}: non-finite loss at round {round_index}, iteration {j}")


def _report(spec, theta, params, share, n, trace, round_index, notes=()):
    names = ShareFilter(share).selected(theta)
    delta = subtract(params.subset(names), theta.subset(names), np.float64)
    return DeltaReport(spec.client_id, round_index, n, delta, list(trace), list(notes)), params


def supervised_client_update(theta: ParamSet, spec: ClientSpec, dataset: SiteDataset, graph: Graph,
                             *, rng: np.random.Generator, optimizer: OptimizerState | None = None,
                             share=ShareFilter.ALL, round_index: int = 0, epochs: int | None = None,
                             patch=PATCH_SIZE):
    """Run ``n`` Dice-loss steps on balanced, augmented patches.

    Returns ``(report, final params)``; the report holds the float64 delta
    over the shared blocks. ``optimizer`` is updated in place.
    """
    n = _check_iterations(spec, epochs)
    train = dataset.indices("train")
    if not train:
        raise ValueError(f"client {spec.client_id}: empty training split")
    images = [dataset.image(i) for i in train]
    labels = [dataset.label(i) for i in train]
    optimizer = optimizer if optimizer is not None else OptimizerState(spec.optimizer)
    params = theta
    trace = deque(maxlen=TRACE_LEN)
    for j in range(n):
        xs, ys = [], []
        for k in rng.integers(0, len(images), spec.batch_size):
            p, lp = sample_patch(images[k], labels[k], patch, rng, spec.balanced)
            p, lp = supervised_augment(p, lp, rng)
            xs.append(p)
            ys.append(lp)
        x = np.stack(xs)[..., None]
        try:
            acts = forward(graph, params, x)
        except FloatingPointError as e:
            raise FloatingPointError(f"client {spec.client_id}: {e} at round {round_index}, "
                                     f"iteration {j}") from None
        loss, dout = supervised_loss_and_grad(acts.output, np.stack(ys))
        _finite(loss, spec, round_index, j)
        grads = backward(graph, acts, dout)
        params = params.replace(optimizer_step(optimizer, params, grads, spec.lr))
        trace.append(float(loss))
    return _report(spec, theta, params, share, n, trace, round_index)


def self_supervised_client_update(theta: ParamSet, spec: ClientSpec, dataset: SiteDataset,
                                  graph: Graph, *, rng: np.random.Generator,
                                  optimizer: OptimizerState | None = None, share=ShareFilter.ALL,
                                  round_index: int = 0, epochs: int | None = None,
                                  patch=PATCH_SIZE):
    """Consistency training on unlabeled patches; never reads labels.

    Each iteration binarizes the current model's prediction on the patch,
    gates it with the confidence mask, and fits the prediction on the
    perturbed patch to it. Pseudo-label and mask are constants.
    """
    n = _check_iterations(spec, epochs)
    train = dataset.indices("train")
    if not train:
        raise ValueError(f"client {spec.client_id}: empty training split")
    images = [dataset.image(i) for i in train]
    optimizer = optimizer if optimizer is not None else OptimizerState(spec.optimizer)
    params = theta
    trace = deque(maxlen=TRACE_LEN)
    empty = 0
    for j in range(n):
        u = np.stack([sample_patch(images[k], None, patch, rng, False)[0]
                      for k in rng.integers(0, len(images), spec.batch_size)])
        src, aug = spec.augment(u, rng)
        try:
            prob = forward(graph, params, src[..., None], keep=False).output
            acts = forward(graph, params, aug[..., None])
        except FloatingPointError as e:
            raise FloatingPointError(f"client {spec.client_id}: {e} at round {round_index}, "
                                     f"iteration {j}") from None
        pseudo = make_pseudo_label(prob)
        mask = confidence_mask(prob, spec.tau)
        if not mask.any():
            empty += 1
        loss, dout = consistency_loss_and_grad(spec.loss, acts.output, pseudo, mask, soft_target=prob)
        _finite(loss, spec, round_index, j)
        grads = backward(graph, acts, dout)
        params = params.replace(optimizer_step(optimizer, params, grads, spec.lr))
        trace.append(float(loss))
    notes = []
    if empty >= STARVED_FRACTION * n:
        notes.append(f"confidence mask empty in {empty} of {n} iterations; training signal starved")
        warnings.warn(f"client {spec.client_id} round {round_index}: {notes[-1]}", RuntimeWarning)
    return _report(spec, theta, params, share, n, trace, round_index, notes)


# -- evaluation ------------------------------------------------------------------------

def dice_score(pred_mask, gt_mask) -> float:
    """``2|P & G| / (|P| + |G|)``; both empty counts as 1."""
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def dice_scores(graph: Graph, params, images, labels, window=INFER_WINDOW,
                stride: int = INFER_STRIDE) -> list[float]:
    probs = predict_images(graph, params, images, window, stride)
    return [dice_score(p[..., 1] > 0.5, lab) for p, lab in zip(probs, labels)]


def evaluate(graph: Graph, params, dataset: SiteDataset, split: str = "test",
             window=INFER_WINDOW, stride: int = INFER_STRIDE) -> float:
    """Mean per-image Dice of the thresholded sliding-window prediction."""
    idx = dataset.indices(split)
    if not idx:
        raise ValueError(f"split {split!r} of site {dataset.site!r} is empty")
    labels = [dataset.label(i) for i in idx]
    return float(np.mean(dice_scores(graph, params, [dataset.image(i) for i in idx], labels,
                                     window, stride)))


# -- stateful client -------------------------------------------------------------------

class Client:
    """One participant: local parameter copy, optimizer state, data."""

    def __init__(self, spec: ClientSpec, dataset: SiteDataset, graph: Graph | None = None,
                 config: ModelConfig | None = None, share=ShareFilter.ALL,
                 window=INFER_WINDOW, stride: int = INFER_STRIDE):
        self.spec = spec
        self.dataset = dataset
        self.graph = graph
        self.config = config
        self.share = ShareFilter(share)
        self.window, self.stride = window, stride
        self.params: ParamSet | None = None
        self.optimizer = OptimizerState(spec.optimizer)
        self.rounds_trained = 0

    @property
    def client_id(self) -> str:
        return self.spec.client_id

    def clone(self) -> "Client":
        other = copy.copy(self)
        other.params = None if self.params is None else self.params.copy()
        other.optimizer = copy.deepcopy(self.optimizer)
        return other

    def receive(self, blocks, stages: dict | None = None) -> None:
        """Merge broadcast blocks into the local parameters."""
        if self.params is None:
            if stages is None or set(blocks) != set(stages):
                raise ValueError(f"client {self.client_id}: first broadcast must carry every block")
            self.params = ParamSet({n: np.array(blocks[n]) for n in stages}, stages)
            return
        merged = dict(self.params.items())
        for n, b in blocks.items():
            if n not in merged or merged[n].shape != np.shape(b):
                raise ValueError(f"client {self.client_id}: unexpected block {n!r}")
            merged[n] = np.array(b, dtype=merged[n].dtype)
        self.params = self.params.replace(merged)

    def train_round(self, round_index: int, seed: int, epochs: int | None = None) -> DeltaReport:
        if self.params is None:
            raise RuntimeError(f"client {self.client_id}: no model received")
        fn = supervised_client_update if self.spec.supervised else self_supervised_client_update
        patch = self.config.patch if self.config is not None else PATCH_SIZE
        with compute_slot():
            report, self.params = fn(self.params, self.spec, self.dataset, self.graph,
                                     rng=np.random.default_rng(seed), optimizer=self.optimizer,
                                     share=self.share, round_index=round_index, epochs=epochs,
                                     patch=patch)
        self.rounds_trained += 1
        return report

    def _score(self, split):
        if not self.dataset.has_labels(split):
            return None
        with compute_slot():
            return evaluate(self.graph, self.params, self.dataset, split, self.window,
                            self.stride)

    def validate(self) -> float | None:
        return self._score("valid") if self.spec.supervised else None

    def test(self) -> float | None:
        return self._score("test")


def run_client(session, client: Client, build=None, timeout: float | None = None) -> list[DeltaReport]:
    """Client side of the protocol; returns the reports it sent.

    ``build(model_dict, seed) -> Graph`` constructs the graph from the join
    acknowledgement when the client has none.
    """
    sent = []
    try:
        session.send(Message(Kind.JOIN, 0, client.client_id,
                             {"spec": client.spec.to_dict(), "has_state": client.params is not None}))
        ack = session.recv(timeout)
        if ack.kind == Kind.ABORT:
            raise RuntimeError(f"server refused client {client.client_id}: {ack.meta.get('reason', '')}")
        if ack.kind != Kind.JOIN_ACK:
            raise RuntimeError(f"expected JoinAck, got {ack.kind.name}")
        client.share = ShareFilter(ack.meta["share"])
        if client.graph is None:
            if build is None:
                raise RuntimeError("client has no graph and no builder")
            client.config = ModelConfig.from_dict(ack.meta["model"])
            client.graph = build(ack.meta["model"], ack.meta["model_seed"])
        stages = ack.meta["stages"]
        while True:
            msg = session.recv(timeout)
            if msg.kind == Kind.ROUND_DONE:
                return sent
            if msg.kind == Kind.ABORT:
                raise RuntimeError(f"server aborted the run: {msg.meta.get('reason', '')}")
            if msg.kind != Kind.BROADCAST_MODEL:
                raise RuntimeError(f"unexpected {msg.kind.name} message")
            meta = msg.meta
            if "share" in meta:
                client.share = ShareFilter(meta["share"])
            client.receive(msg.params or {}, stages)
            valid = client.validate() if meta.get("validate", False) else None
            test = client.test() if meta.get("test", False) else None
            if meta.get("train", True):
                report = client.train_round(msg.round, int(meta["seed"]), meta.get("epochs"))
            else:
                report = DeltaReport(client.client_id, msg.round, 0, None)
            report.valid_dice, report.test_dice = valid, test
            session.send(report.to_message())
            sent.append(report)
    except SessionClosed:
        raise
    except Exception as e:
        try:
            session.send(Message(Kind.ABORT, 0, client.client_id, {"reason": str(e)}))
        except Exception:
            pass
        raise
    finally:
        session.close()

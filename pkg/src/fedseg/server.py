"""Federation server: weighted aggregation, the synchronous round loop,
checkpoint selection and per-client seed derivation."""
from __future__ import annotations

import hashlib
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .client import ClientSpec, DeltaReport
from .model import ModelConfig, build_model
from .params import ParamSet, ShareFilter, apply_delta
from .transport import Kind, Message, SessionClosed

MASK64 = (1 << 64) - 1


# -- seeds -------------------------------------------------------------------------------

def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def client_key(client_id) -> int:
    """32-bit key of a client: integers are used as-is (mod 2^32), strings
    are hashed with BLAKE2b."""
    if isinstance(client_id, (int, np.integer)):
        return int(client_id) & 0xFFFFFFFF
    digest = hashlib.blake2b(str(client_id).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def derive_client_seed(base_seed: int, client_id, round_index: int) -> int:
    """64-bit seed ``splitmix64(splitmix64(base) ^ (key << 32 | round))``.

    For a fixed base this is injective over (32-bit key, 32-bit round):
    the packing is injective and splitmix64 is a bijection.
    ``derive_client_seed(0, 0, 0) == 0xA706DD2F4D197E6F``.
    """
    word = (client_key(client_id) << 32) | (int(round_index) & 0xFFFFFFFF)
    return splitmix64(splitmix64(int(base_seed) & MASK64) ^ word)


# -- aggregation -------------------------------------------------------------------------

class AggregationError(ValueError):
    pass


def aggregation_weights(ns, ws) -> list[float]:
    """``w_hat_i = (n_i / sum n) * w_i``."""
    total = float(sum(ns))
    if total <= 0:
        raise AggregationError("total iteration count must be positive")
    return [(n / total) * w for n, w in zip(ns, ws)]


def aggregate(reports: list[DeltaReport], weights, share=ShareFilter.ALL, template: ParamSet | None = None,
              expected=None):
    """Weighted sum of client deltas over the shared blocks.

    ``weights`` is a list aligned with ``reports`` or a ``client id -> w``
    mapping. ``template`` (the global model) decides which blocks the
    filter selects; without it each delta is taken to cover the full model.
    Returns ``(delta, {client id: w_hat})`` with a float64 delta.
    """
    if not reports:
        raise AggregationError("no reports to aggregate")
    ids = [r.client_id for r in reports]
    if len(set(ids)) != len(ids):
        raise AggregationError(f"duplicate client reports: {ids}")
    if expected is not None:
        missing = [c for c in expected if c not in ids]
        if missing:
            raise AggregationError(f"missing reports from {missing}")
    rounds = {r.round for r in reports}
    if len(rounds) != 1:
        raise AggregationError(f"reports from mixed rounds {sorted(rounds)}")
    ws = [float(weights[c]) for c in ids] if isinstance(weights, dict) else [float(w) for w in weights]
    if len(ws) != len(reports):
        raise AggregationError("one weight per report required")
    if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
        raise AggregationError("weights must be non-negative with at least one positive")
    if any(r.n <= 0 for r in reports):
        raise AggregationError("every report needs n > 0")
    if any(r.delta is None for r in reports):
        raise AggregationError("report without delta")
    share = ShareFilter(share)
    names = share.selected(template if template is not None else reports[0].delta)
    for r in reports:
        for nm in names:
            if nm not in r.delta:
                raise AggregationError(f"client {r.client_id} did not send block {nm!r}")
            if r.delta[nm].shape != reports[0].delta[nm].shape:
                raise AggregationError(f"shape mismatch in block {nm!r} from {r.client_id}")
    what = aggregation_weights([r.n for r in reports], ws)
    out = {}
    for nm in names:
        acc = np.zeros(reports[0].delta[nm].shape, dtype=np.float64)
        for wh, r in zip(what, reports):
            acc += wh * np.asarray(r.delta[nm], dtype=np.float64)
        out[nm] = acc
    stages = (template or reports[0].delta).stages
    return ParamSet(out, {nm: stages[nm] for nm in names}), dict(zip(ids, what))


# -- configuration and records --------------------------------------------------------------

@dataclass
class ServerConfig:
    roster: list
    rounds: int = 50
    share: ShareFilter = ShareFilter.ALL
    epochs_per_round: int = 5
    validate_every: int = 1
    warm_start_rounds: int = 0
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    start_round: int = 1
    round_timeout: float | None = 3600.0
    final_eval: str = "full"   # "full": validate, select, test; "validate": last validation only


    def __post_init__(self):
        self.share = ShareFilter(self.share)
        self.roster = [c if isinstance(c, ClientSpec) else ClientSpec.from_dict(c) for c in self.roster]
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.warm_start_rounds < 0 or self.validate_every < 1 or self.epochs_per_round < 1:
            raise ValueError("warm_start_rounds >= 0, validate_every >= 1, epochs_per_round >= 1 required")
        ids = [c.client_id for c in self.roster]
        if len(set(ids)) != len(ids):
            raise ValueError(f"roster client ids must be unique: {ids}")
        if not any(c.supervised for c in self.roster):
            raise ValueError("the roster needs at least one supervised client")
        if self.final_eval not in ("full", "validate"):
            raise ValueError(f"final_eval must be 'full' or 'validate', got {self.final_eval!r}")

    @property
    def total_rounds(self) -> int:
        return self.warm_start_rounds + self.rounds

    @property
    def last_round(self) -> int:
        return self.start_round + self.total_rounds - 1

    def is_warm(self, t: int) -> bool:
        return t < self.start_round + self.warm_start_rounds

    def validates(self, t: int) -> bool:
        return t >= self.start_round and (t - self.start_round + 1) % self.validate_every == 0

    def client(self, cid: str) -> ClientSpec:
        return next(c for c in self.roster if c.client_id == cid)


@dataclass
class RoundRecord:
    round: int
    phase: str
    participants: list
    n: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    report_norms: dict = field(default_factory=dict)
    aggregate_norm: float = 0.0
    valid_dice: dict = field(default_factory=dict)   # of the model after this round
    loss_mean: dict = field(default_factory=dict)
    warnings: dict = field(default_factory=dict)
    seconds: float = 0.0
    failed: str | None = None

    @property
    def mean_valid(self) -> float | None:
        vals = [v for v in self.valid_dice.values() if v is not None]
        return float(np.mean(vals)) if vals else None


class FederationAborted(RuntimeError):
    def __init__(self, message, round_index, client_id, history):
        super().__init__(message)
        self.round = round_index
        self.client_id = client_id
        self.history = history


@dataclass
class FederationResult:
    best: ParamSet
    best_round: int
    final: ParamSet
    history: list
    test_dice: dict
    snapshots: dict
    events: list


def select_checkpoint(history: list, snapshots: dict, after: int | None = None):
    """``(round, params)`` maximizing mean supervised validation Dice;
    ties go to the earliest round. ``after`` ignores rounds <= it."""
    best_round, best_score = None, None
    for rec in history:
        score = rec.mean_valid
        if score is None or rec.round not in snapshots or (after is not None and rec.round <= after):
            continue
        if best_score is None or score > best_score:
            best_round, best_score = rec.round, score
    if best_round is None:
        raise ValueError("no validated snapshot to select from")
    return best_round, snapshots[best_round]


# -- the server state machine ----------------------------------------------------------------

class FederationServer:
    """Single-threaded round loop; one reader thread per client session
    feeds an ordered inbox."""

    def __init__(self, config: ServerConfig, listener, initial: ParamSet | None = None):
        self.config = config
        self.listener = listener
        self.theta = initial if initial is not None else build_model(config.model, config.seed)[1]
        self.initial = self.theta
        self.stages = self.theta.stages
        self.inbox: queue.Queue = queue.Queue()
        self.sessions: dict = {}
        self.initialized: set = set()
        self.history: list[RoundRecord] = []
        self.snapshots: dict = {}
        self.events: list = []
        self._lock = threading.Lock()

    def log(self, *event):
        with self._lock:
            self.events.append(event)

    # connection handling
    def _reader(self, session):
        cid = None
        try:
            while True:
                msg = session.recv()
                if cid is None:
                    cid = msg.client_id
                self.log("recv", msg.kind.name, msg.client_id, msg.round)
                self.inbox.put((session, msg))
        except (SessionClosed, OSError, ValueError) as e:
            self.inbox.put((session, e))

    def _accept_all(self):
        roster = {c.client_id for c in self.config.roster}
        pending = set(roster)
        accepted = 0
        deadline = None if self.config.round_timeout is None else time.monotonic() + self.config.round_timeout
        while accepted < len(roster):
            timeout = None if deadline is None else max(0.1, deadline - time.monotonic())
            session = self.listener.accept(timeout)
            threading.Thread(target=self._reader, args=(session,), daemon=True).start()
            accepted += 1
        while pending:
            session, msg = self._next()
            if isinstance(msg, Exception):
                raise FederationAborted(f"client connection failed during join: {msg}", 0, None, self.history)
            if msg.kind != Kind.JOIN or msg.client_id not in pending:
                session.send(Message(Kind.ABORT, 0, msg.client_id, {"reason": "unexpected join"}))
                raise FederationAborted(f"unexpected join from {msg.client_id!r}", 0, msg.client_id,
                                        self.history)
            pending.discard(msg.client_id)
            self.sessions[msg.client_id] = session
            if msg.meta.get("has_state"):
                self.initialized.add(msg.client_id)
            session.send(Message(Kind.JOIN_ACK, 0, msg.client_id, {
                "share": self.config.share.value, "model": self.config.model.to_dict(),
                "model_seed": self.config.seed, "stages": self.stages,
                "epochs_per_round": self.config.epochs_per_round}))

    def _next(self):
        try:
            return self.inbox.get(timeout=self.config.round_timeout)
        except queue.Empty:
            raise TimeoutError("timed out waiting for clients") from None

    def _broadcast(self, t, params, cids, meta_fn, share=None):
        share = self.config.share if share is None else share
        for cid in cids:
            if cid in self.initialized:
                blocks = {n: params[n] for n in share.selected(params)}
            else:
                blocks = dict(params.items())
                self.initialized.add(cid)
            self.log("broadcast", cid, t)
            meta = dict(meta_fn(cid), share=share.value)
            self.sessions[cid].send(Message(Kind.BROADCAST_MODEL, t, "server", meta, blocks))

    def _collect(self, t, cids) -> dict:
        got = {}
        while len(got) < len(cids):
            session, msg = self._next()
            if isinstance(msg, Exception):
                cid = next((c for c, s in self.sessions.items() if s is session), "?")
                self._fail(t, cid, f"client {cid} disconnected: {msg}")
            if msg.kind == Kind.ABORT:
                self._fail(t, msg.client_id, f"client {msg.client_id} aborted: {msg.meta.get('reason', '')}")
            if msg.kind != Kind.DELTA_SUBMISSION or msg.round != t or msg.client_id not in cids \
                    or msg.client_id in got:
                self._fail(t, msg.client_id, f"unexpected {msg.kind.name} for round {msg.round} "
                                             f"from {msg.client_id!r}")
            got[msg.client_id] = DeltaReport.from_message(msg, self.stages)
        return got

    def _fail(self, t, cid, reason):
        self.history.append(RoundRecord(t, "failed", [], failed=cid))
        self.log("abort", cid, t)
        for other, s in self.sessions.items():
            try:
                s.send(Message(Kind.ABORT, t, "server", {"reason": reason}))
            except (SessionClosed, OSError):
                pass
            s.close()
        raise FederationAborted(reason, t, cid, self.history)

    def _eval_round(self, t, params, validate, test):
        cids = [c.client_id for c in self.config.roster]
        self._broadcast(t, params, cids, lambda cid: {"train": False, "validate": validate, "test": test},
                        ShareFilter.ALL if self.config.is_warm(t) else None)
        return self._collect(t, cids)

    def run(self) -> FederationResult:
        cfg = self.config
        roster_ids = [c.client_id for c in cfg.roster]
        sup_ids = [c.client_id for c in cfg.roster if c.supervised]
        self._accept_all()
        by_round = {}
        for t in range(cfg.start_round, cfg.last_round + 1):
            tic = time.perf_counter()
            warm = cfg.is_warm(t)
            cids = sup_ids if warm else roster_ids
            share = ShareFilter.ALL if warm else cfg.share
            prev = t - 1

            def meta(cid, t=t, prev=prev):
                return {"train": True, "epochs": cfg.epochs_per_round,
                        "seed": derive_client_seed(cfg.seed, cfg.client(cid).seed_key, t),
                        "validate": prev in by_round and cfg.validates(prev), "test": False}

            self._broadcast(t, self.theta, cids, meta, share)
            reports = self._collect(t, cids)
            ordered = [reports[c] for c in cids]
            delta, what = aggregate(ordered, {c: cfg.client(c).weight for c in cids}, share,
                                    self.theta, expected=cids)
            self.log("aggregate", t)
            self.theta = apply_delta(self.theta, delta, share)
            rec = RoundRecord(t, "warm" if warm else "fl", list(cids),
                              n={r.client_id: r.n for r in ordered}, weights=what,
                              report_norms={r.client_id: r.delta.norm() for r in ordered},
                              aggregate_norm=delta.norm(),
                              loss_mean={r.client_id: float(np.mean(r.losses)) if r.losses else 0.0
                                         for r in ordered},
                              warnings={r.client_id: r.warnings for r in ordered if r.warnings})
            if prev in by_round:
                by_round[prev].valid_dice = {r.client_id: r.valid_dice for r in ordered
                                             if r.valid_dice is not None}
            rec.seconds = time.perf_counter() - tic
            self.history.append(rec)
            by_round[t] = rec
            if cfg.validates(t) or t == cfg.last_round:
                self.snapshots[t] = self.theta

        last = cfg.last_round
        validate_last = cfg.final_eval == "full" or cfg.validates(last)
        final_reports = self._eval_round(last, self.theta, validate_last, False)
        by_round[last].valid_dice = {c: final_reports[c].valid_dice for c in roster_ids
                                     if final_reports[c].valid_dice is not None}
        test = {}
        if cfg.final_eval == "full":
            after = cfg.start_round + cfg.warm_start_rounds - 1
            best_round, best = select_checkpoint(self.history, self.snapshots, after)
            test_reports = self._eval_round(last, best, False, True)
            test = {c: test_reports[c].test_dice for c in roster_ids
                    if test_reports[c].test_dice is not None}
        else:
            best_round, best = last, self.theta
        for cid in roster_ids:
            self.sessions[cid].send(Message(Kind.ROUND_DONE, cfg.last_round, "server",
                                            {"final": True, "best_round": best_round}))
            self.sessions[cid].close()
        self.log("done", cfg.last_round)
        return FederationResult(best, best_round, self.theta, self.history, test, self.snapshots,
                                list(self.events))


def run_federation(config: ServerConfig, listener, initial: ParamSet | None = None) -> FederationResult:
    """Serve one complete federation on ``listener`` (loopback hub or
    socket listener)."""
    return FederationServer(config, listener, initial).run()

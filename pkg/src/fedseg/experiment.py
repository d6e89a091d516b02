"""Config-driven experiments: simulations, baselines, ablations, data
generation and evaluation, with CSV/JSON outputs.

Config schema (JSON)::

    {
      "name": str,
      "mode": "simulate" | "local-train" | "fl-server" | "fl-client"
              | "generate-data" | "evaluate" | "ablate",
      "seeds": [int, ...],
      "data": {"seed": int,
               "sites": {"<site>": {"preset": "A", "counts": [tr, va, te],
                                    "labeled": bool, "profile": {...}}
                                   | {"path": "file.fsds"}}},
      "model": {ModelConfig fields},
      "server": {"rounds", "warm_start_rounds", "epochs_per_round",
                 "validate_every", "share"},
      "clients": [{ClientSpec fields; "dataset" names a site}],
      "baseline": bool,           # also run the supervised-only roster
      "evaluate_sites": [site, ...],
      "window": [h, w], "stride": int,
      "ablation": {"axis": str, "values": [...]},
      "checkpoint": path          # evaluate mode
    }
"""
from __future__ import annotations

import copy
import csv
import io
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import PRESETS as AUGMENT_PRESETS
from .client import Client, ClientSpec, dice_scores
from .data import PROFILES, SITE_SPLITS, SiteDataset, SiteProfile, generate_site, load_dataset, save_dataset
from .losses import ALL_LOSS_KINDS
from .model import INFER_STRIDE, INFER_WINDOW, ModelConfig, build_model
from .params import ShareFilter
from .server import RoundRecord, ServerConfig, derive_client_seed, select_checkpoint
from .simulation import make_clients, simulate
from .transport import load_checkpoint, save_checkpoint

MODES = ("local-train", "fl-server", "fl-client", "simulate", "generate-data", "evaluate", "ablate")
CSV_FIELDS = ("seed", "run", "round", "client", "split", "dice")
EVAL_FIELDS = ("seed", "run", "round", "site", "split", "dice")

ABLATION_AXES = {
    "loss": [k.name for k in ALL_LOSS_KINDS],
    "augmentation": list(AUGMENT_PRESETS),
    "agg-weights": [1.0, 0.75, 0.5, 0.25, 0.1],
    "partial-share": [f.value for f in ShareFilter],
    "lr": [1e-6, 5e-6, 1e-5, 5e-5, 1e-4],
    "agg-frequency": [5, 10, 20, 40],
}


class ConfigError(ValueError):
    pass


# -- config -----------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    name: str = "experiment"
    mode: str = "simulate"
    seeds: list = field(default_factory=lambda: [0])
    data: dict = field(default_factory=lambda: {"seed": 1234, "sites": {"A": {"preset": "A"}}})
    model: dict = field(default_factory=dict)
    server: dict = field(default_factory=dict)
    clients: list = field(default_factory=list)
    baseline: bool = False
    evaluate_sites: list = field(default_factory=list)
    window: list | None = None
    stride: int | None = None
    ablation: dict = field(default_factory=dict)
    checkpoint: str | None = None
    base_dir: str = "."

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        self.seeds = [int(s) for s in self.seeds]
        sites = self.data.get("sites", {})
        for c in self.clients:
            if c.get("dataset") not in sites:
                raise ConfigError(f"client {c.get('client_id')!r} references unknown site {c.get('dataset')!r}")
        for s in self.evaluate_sites:
            if s not in sites:
                raise ConfigError(f"evaluate_sites references unknown site {s!r}")
        for name, entry in sites.items():
            if "path" in entry and not os.path.exists(self._path(entry["path"])):
                raise ConfigError(f"dataset file for site {name!r} not found: {entry['path']}")
            if "path" not in entry and entry.get("preset", name) not in PROFILES:
                raise ConfigError(f"site {name!r} has no path and no known preset")

    def _path(self, p):
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**copy.deepcopy(d), base_dir=base_dir)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            try:
                d = json.load(f)
            except ValueError as e:
                raise ConfigError(f"{path}: invalid JSON: {e}") from None
        return cls.from_dict(d, os.path.dirname(os.path.abspath(path)))

    def to_dict(self) -> dict:
        d = {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__ if k != "base_dir"}
        return d

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model) if self.model else ModelConfig()

    @property
    def infer(self):
        return (tuple(self.window) if self.window else INFER_WINDOW), (self.stride or INFER_STRIDE)

    def roster(self) -> list[ClientSpec]:
        return [ClientSpec.from_dict(c) for c in self.clients]

    def server_config(self, seed: int, roster=None, **overrides) -> ServerConfig:
        s = dict(self.server)
        s.update(overrides)
        return ServerConfig(roster if roster is not None else self.roster(), seed=seed,
                            model=self.model_config, **s)


def load_sites(cfg: ExperimentConfig) -> dict:
    out = {}
    data_seed = int(cfg.data.get("seed", 1234))
    for name, entry in cfg.data.get("sites", {}).items():
        if "path" in entry:
            out[name] = load_dataset(cfg._path(entry["path"]))
            continue
        preset = entry.get("preset", name)
        profile = PROFILES[preset]
        if entry.get("profile"):
            profile = replace(profile, **entry["profile"])
        counts, labeled = SITE_SPLITS[preset]
        counts = tuple(entry.get("counts", counts))
        labeled = entry.get("labeled", labeled)
        # each site draws from its own stream; shared anatomy needs an explicit "seed"
        seed = int(entry.get("seed", data_seed + sorted(PROFILES).index(preset)))
        out[name] = generate_site(profile, sum(counts), seed, split=counts, labeled=labeled, site=name)
    return out


# -- single runs ----------------------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    run: str
    history: list
    best_round: int
    test_dice: dict
    best: object
    final: object
    evaluations: dict = field(default_factory=dict)   # site -> test Dice of the best model
    clients: dict = field(default_factory=dict)

    @property
    def best_valid(self) -> float | None:
        for rec in self.history:
            if rec.round == self.best_round:
                return rec.mean_valid
        return None


def _eval_sites(graph, params, sites, names, infer):
    window, stride = infer
    out = {}
    for s in names:
        ds = sites[s]
        idx = ds.indices("test")
        out[s] = float(np.mean(dice_scores(graph, params, [ds.image(i) for i in idx],
                                           [ds.label(i) for i in idx], window, stride)))
    return out


def warm_start(cfg: ExperimentConfig, seed: int, sites: dict, graph=None):
    """Supervised-only phase shared by every branch of one seed; returns
    ``(params, clients, history, graph)``."""
    scfg = cfg.server_config(seed)
    sup = [c for c in scfg.roster if c.supervised]
    if graph is None:
        graph = build_model(scfg.model, seed)[0]
    W = scfg.warm_start_rounds
    wcfg = replace(scfg, roster=sup, rounds=W, warm_start_rounds=0, share=ShareFilter.ALL,
                   final_eval="validate")
    clients = make_clients(wcfg, {c.client_id: sites[c.dataset] for c in sup}, graph, *cfg.infer)
    sim = simulate(wcfg, clients)
    return sim.result.final, sim.clients, sim.result.history, graph


def run_branch(cfg: ExperimentConfig, seed: int, sites: dict, roster, run: str, warm=None,
               graph=None, transport: str = "loopback", **server_overrides) -> RunResult:
    """One federation for ``roster``; with ``warm`` it continues from a
    shared warm start."""
    scfg = cfg.server_config(seed, roster, **server_overrides)
    initial, prior, history = None, {}, []
    if warm is not None and scfg.warm_start_rounds > 0:
        initial, warm_clients, history, graph = warm
        prior = {cid: c.clone() for cid, c in warm_clients.items()}
        scfg = replace(scfg, start_round=scfg.warm_start_rounds + 1, warm_start_rounds=0)
    if graph is None:
        graph = build_model(scfg.model, seed)[0]
    fresh = make_clients(scfg, {c.client_id: sites[c.dataset] for c in scfg.roster}, graph, *cfg.infer)
    clients = {cid: prior.get(cid, c) for cid, c in fresh.items()}
    for c in clients.values():
        c.share = scfg.share
    sim = simulate(scfg, clients, initial, transport=transport)
    res = sim.result
    out = RunResult(seed, run, list(history) + list(res.history), res.best_round, res.test_dice,
                    res.best, res.final, clients=sim.clients)
    out.evaluations = _eval_sites(graph, res.best, sites, cfg.evaluate_sites, cfg.infer)
    return out


def run_seed(cfg: ExperimentConfig, seed: int, sites: dict, warm=None, transport="loopback",
             **server_overrides) -> list[RunResult]:
    """The federated run and, with ``baseline``, the supervised-only run
    from the same warm start."""
    roster = cfg.roster()
    W = int(cfg.server.get("warm_start_rounds", 0))
    graph = build_model(cfg.model_config, seed)[0]
    if W > 0 and warm is None:
        warm = warm_start(cfg, seed, sites, graph)
    results = [run_branch(cfg, seed, sites, roster, "fl", warm, graph, transport, **server_overrides)]
    sup = [c for c in roster if c.supervised]
    if cfg.baseline and len(sup) < len(roster):
        results.append(run_branch(cfg, seed, sites, sup, "baseline", warm, graph, transport,
                                  **server_overrides))
    return results


def local_train(spec: ClientSpec, dataset: SiteDataset, model: ModelConfig, rounds: int, epochs: int,
                seed: int, graph=None, initial=None, validate_every: int = 1, infer=None):
    """Sequential training of one client without any server, with the
    federation's per-round seeds. Returns ``(history, final, best_round, best)``."""
    g, theta = build_model(model, seed)
    graph = graph or g
    theta = initial if initial is not None else theta
    window, stride = infer or (INFER_WINDOW, INFER_STRIDE)
    client = Client(spec, dataset, graph, model, ShareFilter.ALL, window, stride)
    client.receive(dict(theta.items()), theta.stages)
    history, snaps = [], {}
    for t in range(1, rounds + 1):
        rep = client.train_round(t, derive_client_seed(seed, spec.seed_key, t), epochs)
        rec = RoundRecord(t, "local", [spec.client_id], n={spec.client_id: rep.n})
        if t % validate_every == 0 or t == rounds:
            v = client.validate()
            if v is not None:
                rec.valid_dice = {spec.client_id: v}
            snaps[t] = client.params
        history.append(rec)
    try:
        best_round, best = select_checkpoint(history, snaps)
    except ValueError:
        best_round, best = rounds, client.params
    return history, client.params, best_round, best


# -- outputs ----------------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".10f")


def result_rows(res: RunResult) -> list[tuple]:
    rows = []
    for rec in res.history:
        for cid, v in rec.valid_dice.items():
            rows.append((res.seed, res.run, rec.round, cid, "valid", _fmt(v)))
    for cid, v in res.test_dice.items():
        rows.append((res.seed, res.run, res.best_round, cid, "test", _fmt(v)))
    return rows


def eval_rows(res: RunResult) -> list[tuple]:
    return [(res.seed, res.run, res.best_round, s, "test", _fmt(v)) for s, v in res.evaluations.items()]


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(sorted(rows, key=lambda r: tuple(str(x) if i not in (0, 2) else int(x)
                                                  for i, x in enumerate(r))))
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())


def summarize(results: list[RunResult]) -> dict:
    """Mean and (population) std across seeds of every final test score,
    site evaluation and best validation score."""
    groups: dict = {}
    for r in results:
        for cid, v in r.test_dice.items():
            groups.setdefault((r.run, cid, "test"), []).append((r.seed, v))
        for s, v in r.evaluations.items():
            groups.setdefault((r.run, f"site:{s}", "test"), []).append((r.seed, v))
        if r.best_valid is not None:
            groups.setdefault((r.run, "supervised", "best_valid"), []).append((r.seed, r.best_valid))
    rows = []
    for (run, who, split), vals in sorted(groups.items()):
        xs = np.array([v for _, v in vals], dtype=np.float64)
        rows.append({"run": run, "client": who, "split": split, "mean": float(xs.mean()),
                     "std": float(xs.std()), "n": len(xs),
                     "per_seed": {str(s): float(v) for s, v in vals}})
    return {"rows": rows}


def _prepare_out(cfg: ExperimentConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)


def write_outputs(results: list[RunResult], out_dir) -> dict:
    rows = [row for r in results for row in result_rows(r)]
    write_csv(os.path.join(out_dir, "metrics.csv"), CSV_FIELDS, rows)
    erows = [row for r in results for row in eval_rows(r)]
    if erows:
        write_csv(os.path.join(out_dir, "evaluations.csv"), EVAL_FIELDS, erows)
    summary = summarize(results)
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary


# -- entry points ------------------------------------------------------------------------------

def run_simulation(cfg: ExperimentConfig, out_dir=None, transport: str = "loopback") -> list[RunResult]:
    """Every seed over in-process transport; writes ``metrics.csv``,
    ``evaluations.csv``, ``summary.json`` and ``config.json``."""
    sites = load_sites(cfg)
    results = []
    for seed in cfg.seeds:
        results.extend(run_seed(cfg, seed, sites, transport=transport))
    if out_dir is not None:
        _prepare_out(cfg, out_dir)
        write_outputs(results, out_dir)
    return results


def run_local(cfg: ExperimentConfig, out_dir=None) -> list[RunResult]:
    """Each supervised client trained alone for warm-start + rounds rounds."""
    sites = load_sites(cfg)
    scfg_proto = cfg.server_config(cfg.seeds[0])
    results = []
    for seed in cfg.seeds:
        for spec in scfg_proto.roster:
            if not spec.supervised:
                continue
            hist, final, best_round, best = local_train(
                spec, sites[spec.dataset], scfg_proto.model, scfg_proto.total_rounds,
                scfg_proto.epochs_per_round, seed, validate_every=scfg_proto.validate_every,
                infer=cfg.infer)
            graph = build_model(scfg_proto.model, seed)[0]
            ds = sites[spec.dataset]
            test = {}
            if ds.has_labels("test"):
                test[spec.client_id] = _eval_sites(graph, best, {spec.dataset: ds}, [spec.dataset],
                                                   cfg.infer)[spec.dataset]
            r = RunResult(seed, f"local:{spec.client_id}", hist, best_round, test, best, final)
            r.evaluations = _eval_sites(graph, best, sites, cfg.evaluate_sites, cfg.infer)
            results.append(r)
    if out_dir is not None:
        _prepare_out(cfg, out_dir)
        write_outputs(results, out_dir)
    return results


def _ablation_setting(cfg: ExperimentConfig, axis: str, value):
    """Config and server overrides of one ablation setting."""
    c = copy.deepcopy(cfg)
    overrides = {}
    unsup = [d for d in c.clients if d.get("role") == "unsupervised"]
    if axis == "loss":
        for d in unsup:
            d["loss"] = str(value)
    elif axis == "augmentation":
        if value not in AUGMENT_PRESETS:
            raise ConfigError(f"unknown augmentation preset {value!r}")
        for d in unsup:
            d["augment"] = AUGMENT_PRESETS[value].to_dict()
    elif axis == "agg-weights":
        for d in unsup:
            d["weight"] = float(value)
    elif axis == "partial-share":
        overrides["share"] = ShareFilter(value)
    elif axis == "lr":
        for d in unsup:
            d["lr"] = float(value)
    elif axis == "agg-frequency":
        base_epochs = int(cfg.server.get("epochs_per_round", 5))
        base_rounds = int(cfg.server.get("rounds", 50))
        overrides["epochs_per_round"] = int(value)
        overrides["rounds"] = max(1, int(round(base_rounds * base_epochs / int(value))))
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    return c, overrides


def ablation_label(axis, value) -> str:
    if axis == "agg-weights":
        return f"1.0:{value}"
    return str(value)


def run_ablation(axis: str, cfg: ExperimentConfig, out_dir=None, values=None) -> list[dict]:
    """One summary row per setting of ``axis``; all settings share the
    seeds and the per-seed warm start."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    values = list(values if values is not None else cfg.ablation.get("values") or ABLATION_AXES[axis])
    sites = load_sites(cfg)
    warm_cache = {}
    table, all_results = [], []
    W = int(cfg.server.get("warm_start_rounds", 0))
    for value in values:
        c, overrides = _ablation_setting(cfg, axis, value)
        results = []
        for seed in cfg.seeds:
            if W > 0 and seed not in warm_cache:
                warm_cache[seed] = warm_start(cfg, seed, sites)
            res = run_branch(c, seed, sites, c.roster(), ablation_label(axis, value), warm_cache.get(seed),
                             **overrides)
            results.append(res)
        all_results.extend(results)
        row = {"axis": axis, "setting": ablation_label(axis, value)}
        bv = [r.best_valid for r in results if r.best_valid is not None]
        row["best_valid_mean"] = float(np.mean(bv)) if bv else None
        row["best_valid_std"] = float(np.std(bv)) if bv else None
        for s in cfg.evaluate_sites:
            xs = [r.evaluations[s] for r in results]
            row[f"{s}_test_mean"] = float(np.mean(xs))
            row[f"{s}_test_std"] = float(np.std(xs))
        table.append(row)
    if out_dir is not None:
        _prepare_out(cfg, out_dir)
        write_outputs(all_results, out_dir)
        keys = list(table[0]) if table else []
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys, lineterminator="\n")
            w.writeheader()
            w.writerows(table)
        with open(os.path.join(out_dir, "ablation.json"), "w") as f:
            json.dump(table, f, indent=2)
    return table


def generate_data(out_dir, seed: int = 1234, sites=tuple(SITE_SPLITS)) -> dict:
    """Write ``site_<name>.fsds`` (+ JSON sidecar) for each preset site."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out_dir}: {e}") from None
    paths = {}
    for name in sites:
        if name not in PROFILES:
            raise ConfigError(f"unknown site preset {name!r}")
        counts, labeled = SITE_SPLITS[name]
        ds = generate_site(PROFILES[name], sum(counts), seed + sorted(PROFILES).index(name),
                           split=counts, labeled=labeled, site=name)
        path = os.path.join(out_dir, f"site_{name}.fsds")
        save_dataset(ds, path)
        paths[name] = path
    return paths


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint=None, out_dir=None) -> dict:
    path = checkpoint or cfg.checkpoint
    if not path:
        raise ConfigError("evaluate mode needs a checkpoint path")
    params, msg = load_checkpoint(cfg._path(path) if not os.path.isabs(path) else path)
    model = ModelConfig.from_dict(msg.meta["model"]) if "model" in msg.meta else cfg.model_config
    seed = int(msg.meta.get("model_seed", cfg.seeds[0]))
    graph = build_model(model, seed)[0]
    sites = load_sites(cfg)
    names = cfg.evaluate_sites or [s for s, ds in sites.items() if ds.has_labels("test")]
    scores = _eval_sites(graph, params, sites, names, cfg.infer)
    if out_dir is not None:
        _prepare_out(cfg, out_dir)
        write_csv(os.path.join(out_dir, "evaluations.csv"), EVAL_FIELDS,
                  [(seed, "checkpoint", msg.round, s, "test", _fmt(v)) for s, v in scores.items()])
    return scores


def checkpoint_meta(cfg: ServerConfig) -> dict:
    return {"model": cfg.model.to_dict(), "model_seed": cfg.seed}


__all__ = ["ExperimentConfig", "ConfigError", "run_simulation", "run_ablation", "run_local", "run_seed",
           "run_branch", "warm_start", "local_train", "generate_data", "evaluate_checkpoint",
           "summarize", "load_sites", "ABLATION_AXES", "save_checkpoint", "SiteProfile"]

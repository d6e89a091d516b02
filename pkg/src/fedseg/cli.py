"""Command-line entry point: ``fedseg --mode M --config PATH ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import experiment as ex
from .runtime import ENV_DETERMINISTIC, deterministic, limit_threads

log = logging.getLogger("fedseg")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedseg", description="Federated semi-supervised segmentation")
    p.add_argument("--config", metavar="PATH", help="experiment config (JSON)")
    p.add_argument("--mode", choices=ex.MODES, help="overrides the config's mode")
    p.add_argument("--seed-list", metavar="S1,S2,...", help="comma-separated seeds")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--listen", metavar="ADDR", help="fl-server: host:port to listen on")
    p.add_argument("--connect", metavar="ADDR", help="fl-client: server host:port")
    p.add_argument("--client", metavar="ID", help="fl-client: roster id to play")
    p.add_argument("--axis", choices=sorted(ex.ABLATION_AXES), help="ablate: axis to sweep")
    p.add_argument("--checkpoint", metavar="PATH", help="evaluate: checkpoint file")
    p.add_argument("--sites", metavar="A,B,...", help="generate-data: site presets")
    p.add_argument("--data-seed", type=int, default=1234, help="generate-data: seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ex.ConfigError(f"bad --seed-list {text!r}") from None
    if not seeds:
        raise ex.ConfigError("--seed-list is empty")
    return seeds


def _load(args) -> ex.ExperimentConfig:
    if not args.config:
        raise ex.ConfigError(f"--config is required for mode {args.mode!r}")
    if not os.path.exists(args.config):
        raise ex.ConfigError(f"config file not found: {args.config}")
    cfg = ex.ExperimentConfig.load(args.config)
    if args.mode:
        cfg.mode = args.mode
    if args.seed_list:
        cfg.seeds = _seeds(args.seed_list)
    return cfg


def _need(value, flag, mode):
    if not value:
        raise ex.ConfigError(f"{flag} is required for mode {mode}")
    return value


def _serve(cfg: ex.ExperimentConfig, address: str, out: str) -> None:
    from .server import run_federation
    from .transport import SocketListener, save_checkpoint

    listener = SocketListener(address)
    log.info("listening on %s", listener.address)
    results = []
    try:
        for seed in cfg.seeds:
            scfg = cfg.server_config(seed)
            res = run_federation(scfg, listener)
            r = ex.RunResult(seed, "fl", res.history, res.best_round, res.test_dice, res.best, res.final)
            results.append(r)
            if out:
                os.makedirs(out, exist_ok=True)
                save_checkpoint(os.path.join(out, f"best_seed{seed}.fssl"), res.best, res.best_round,
                                ex.checkpoint_meta(scfg))
            log.info("seed %d done; best round %d", seed, res.best_round)
    finally:
        listener.close()
    if out:
        ex._prepare_out(cfg, out)
        ex.write_outputs(results, out)


def _join(cfg: ex.ExperimentConfig, address: str, client_id: str) -> None:
    from .client import Client, run_client
    from .simulation import _build_graph
    from .transport import connect

    specs = {c.client_id: c for c in cfg.roster()}
    if client_id not in specs:
        raise ex.ConfigError(f"client {client_id!r} is not in the roster {sorted(specs)}")
    spec = specs[client_id]
    dataset = ex.load_sites(cfg)[spec.dataset]
    window, stride = cfg.infer
    for seed in cfg.seeds:
        client = Client(spec, dataset, None, None, window=window, stride=stride)
        run_client(connect(address, timeout=120.0), client, build=_build_graph)
        log.info("client %s finished seed %d", client_id, seed)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    _limits = limit_threads()  # noqa: F841  (kept alive for the whole run)
    if deterministic():
        log.info("%s=1: single-worker deterministic execution", ENV_DETERMINISTIC)
    try:
        mode = args.mode
        if mode == "generate-data" and not args.config:
            sites = args.sites.split(",") if args.sites else list(ex.SITE_SPLITS)
            paths = ex.generate_data(_need(args.out, "--out", mode), args.data_seed, sites)
            print(json.dumps(paths, indent=2))
            return 0
        cfg = _load(args)
        mode = cfg.mode
        out = args.out
        if mode == "generate-data":
            sites = args.sites.split(",") if args.sites else list(ex.SITE_SPLITS)
            print(json.dumps(ex.generate_data(_need(out, "--out", mode),
                                              int(cfg.data.get("seed", args.data_seed)), sites), indent=2))
        elif mode == "simulate":
            ex.run_simulation(cfg, _need(out, "--out", mode))
        elif mode == "local-train":
            ex.run_local(cfg, _need(out, "--out", mode))
        elif mode == "ablate":
            axis = args.axis or cfg.ablation.get("axis")
            table = ex.run_ablation(_need(axis, "--axis", mode), cfg, _need(out, "--out", mode))
            print(json.dumps(table, indent=2))
        elif mode == "evaluate":
            scores = ex.evaluate_checkpoint(cfg, args.checkpoint, out)
            print(json.dumps(scores, indent=2))
        elif mode == "fl-server":
            _serve(cfg, _need(args.listen, "--listen", mode), out)
        elif mode == "fl-client":
            _join(cfg, _need(args.connect, "--connect", mode), _need(args.client, "--client", mode))
        return 0
    except ex.ConfigError as e:
        print(f"fedseg: configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # any module error: nonzero exit with a diagnostic
        print(f"fedseg: error: {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Run a server and its clients in one process, over loopback or local
sockets."""
from __future__ import annotations

import threading
from dataclasses import dataclass

from .client import Client, run_client
from .model import ModelConfig, build_model
from .params import ParamSet
from .server import FederationResult, ServerConfig, run_federation
from .transport import LoopbackHub, SocketListener, connect


@dataclass
class SimulationResult:
    result: FederationResult
    clients: dict
    graph: object


def make_clients(config: ServerConfig, datasets: dict, graph=None, window=None, stride=None) -> dict:
    """One fresh :class:`Client` per roster entry; ``datasets`` maps client
    id to its :class:`SiteDataset`."""
    from .model import INFER_STRIDE, INFER_WINDOW

    graph = graph if graph is not None else build_model(config.model, config.seed)[0]
    return {spec.client_id: Client(spec, datasets[spec.client_id], graph, config.model, config.share,
                                   window or INFER_WINDOW, stride or INFER_STRIDE)
            for spec in config.roster}


def simulate(config: ServerConfig, clients: dict, initial: ParamSet | None = None,
             transport: str = "loopback", address: str = "127.0.0.1:0") -> SimulationResult:
    """Serve ``config`` with every client in its own thread.

    ``clients`` maps roster ids to :class:`Client` objects; clients that
    already hold parameters continue from their local state.
    """
    if transport == "loopback":
        listener = LoopbackHub()
        opener = lambda cid: listener.connect(cid)  # noqa: E731
    elif transport == "socket":
        listener = SocketListener(address)
        opener = lambda cid: connect(listener.address)  # noqa: E731
    else:
        raise ValueError(f"unknown transport {transport!r}")

    errors = {}

    def worker(cid, session):
        try:
            run_client(session, clients[cid], build=_build_graph)
        except Exception as e:  # surfaced through the server's abort path
            errors[cid] = e

    threads = []
    try:
        for spec in config.roster:
            session = opener(spec.client_id)
            t = threading.Thread(target=worker, args=(spec.client_id, session), daemon=True,
                                 name=f"client-{spec.client_id}")
            t.start()
            threads.append(t)
        result = run_federation(config, listener, initial)
    finally:
        for t in threads:
            t.join(timeout=60)
        listener.close()
    graph = next(iter(clients.values())).graph if clients else None
    return SimulationResult(result, clients, graph)


def _build_graph(model: dict, seed: int):
    return build_model(ModelConfig.from_dict(model), seed)[0]

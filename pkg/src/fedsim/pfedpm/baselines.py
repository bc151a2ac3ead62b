"""Reference methods: every client on its own, and federated parameter averaging."""
import logging
from dataclasses import replace
from typing import Optional
from typing import Sequence

import numpy as np

from .errors import ContractError
from .metrics import RoundMetrics
from .metrics import collect_round_metrics
from .metrics import comm_cost
from .protocol import ClientState
from .protocol import RoundConfig
from .protocol import ServerState
from .protocol import local_update
from .protocol import map_clients
from .protocol import run_pfedpm

logger = logging.getLogger(__name__)


def run_local_baseline(
    clients: Sequence[ClientState], cfg: RoundConfig, threads: int = 1, server: Optional[ServerState] = None
) -> list[RoundMetrics]:
    """Trains every client alone on cross-entropy, with nothing uploaded.

    This is the prototype protocol with ``a = 1``, ``lam = 0``, aggregation
    disabled and no relation head.
    """
    local_cfg = replace(cfg, a=1.0, lam=0.0, aggregate=False, relation_epochs=0)
    return run_pfedpm(server if server is not None else ServerState(), clients, local_cfg, threads)


def average_parameters(param_lists: Sequence[Sequence[np.ndarray]], weights: Sequence[float]) -> list[np.ndarray]:
    """Weighted mean of parameter lists, accumulated in list order.

    Parameters
    ----------
    param_lists : sequence of sequences of numpy.ndarray
        One list of parameter arrays per client, in client-id order.
    weights : sequence of float
        Positive client weights, normalized here.

    Returns
    -------
    One averaged array per parameter position.

    Raises
    ------
    ContractError
        Empty input, non-positive weights, or clients whose parameter shapes differ.

    """
    if not param_lists or len(param_lists) != len(weights):
        raise ContractError(f"{len(param_lists)} parameter lists for {len(weights)} weights")
    if any(w <= 0 for w in weights):
        raise ContractError(f"weights must be positive, got {list(weights)}")
    shapes = [tuple(np.shape(p) for p in params) for params in param_lists]
    if any(s != shapes[0] for s in shapes):
        raise ContractError("parameter averaging needs identical architectures on every client")

    total = float(sum(weights))
    averaged = []
    for position, shape in enumerate(shapes[0]):
        acc = np.zeros(shape)
        for params, weight in zip(param_lists, weights):
            acc = acc + (weight / total) * np.asarray(params[position])
        averaged.append(acc)
    return averaged


def _parameters(client: ClientState):
    return client.body.parameters() + client.decision.parameters()


def _broadcast(clients: Sequence[ClientState], values: Sequence[np.ndarray]):
    for client in clients:
        for param, value in zip(_parameters(client), values):
            param.data = np.array(value)


def run_fedavg_baseline(
    clients: Sequence[ClientState], cfg: RoundConfig, threads: int = 1, server: Optional[ServerState] = None
) -> list[RoundMetrics]:
    """Federated averaging of body and decision-head parameters, weighted by training-set size.

    Client 0's initial parameters are broadcast first so every client starts
    from the same model. Each round, clients train on cross-entropy alone, upload
    all parameters, and receive the weighted mean.

    Raises
    ------
    ContractError
        If clients do not share one architecture.

    """
    if not clients:
        raise ContractError("at least one client is needed")
    shapes = {tuple(p.shape for p in _parameters(c)) for c in clients}
    if len(shapes) > 1:
        raise ContractError("FedAvg needs identical body and decision-head architectures on every client")

    server = server if server is not None else ServerState()
    train_cfg = replace(cfg, lam=0.0, relation_epochs=0)
    _broadcast(clients, [p.data for p in _parameters(clients[0])])
    weights = [c.split.train_size for c in clients]
    feature_dim = clients[0].body.spec.feature_dim

    series = []
    for _ in range(cfg.rounds):
        round_index = server.round + 1
        traces = map_clients(lambda c: local_update(c, train_cfg), clients, threads)
        averaged = average_parameters([[p.data for p in _parameters(c)] for c in clients], weights)
        _broadcast(clients, averaged)

        entry = comm_cost(
            round_index,
            {c.id: len(c.split.classes) for c in clients},
            feature_dim,
            {c.id: c.parameter_count for c in clients},
            "fedavg",
        )
        server.ledger.record(entry)
        server.round = round_index
        series.append(
            collect_round_metrics(round_index, clients, traces, entry, server.ledger.cumulative_scalars()[-1], False)
        )
    logger.info("FedAvg uploaded %d scalars over %d rounds", server.ledger.total_scalars, cfg.rounds)
    return series

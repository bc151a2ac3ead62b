"""The personalized prototype-mixing round: local training, upload, aggregation, mixing and relation training.

A round runs in six steps, each client in ascending id order:

1. ``local_update``: E epochs of minibatch SGD on the body and decision head,
   regularized toward the mixed prototypes of the previous round;
2. ``compute_local_prototypes``: per-class mean features over the full training split;
3. upload of the local prototypes with their counts;
4. ``aggregate_global`` on the server;
5. ``mix_prototypes`` on every client;
6. ``train_relation`` with the body frozen.

Steps 1, 2 and 6 touch one client at a time and run on a thread pool when
``threads > 1``; every reduction across clients happens in client-id order, so
the outcome does not depend on the number of threads.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import field
from typing import Callable
from typing import Optional
from typing import Sequence
from typing import TypeVar
from typing import Union

import numpy as np

from .data import ClientSplit
from .data import Dataset
from .errors import ContractError
from .errors import ProtocolError
from .metrics import CommLedger
from .metrics import RoundMetrics
from .metrics import collect_round_metrics
from .metrics import comm_cost
from .models import DEFAULT_RELATION_HIDDEN
from .models import Body
from .models import BodySpec
from .models import DecisionHead
from .models import OptimizerState
from .models import RelationHead
from .models import init_body
from .models import init_decision_head
from .models import init_relation_head
from .models import relation_pairs
from .models import sgd_step
from .prototypes import Prototype
from .prototypes import PrototypeSet
from .prototypes import UploadMsg
from .prototypes import aggregate_global
from .prototypes import mix_prototypes
from .streams import Stream
from .streams import generator
from .tensor import DiffGraph
from .tensor import Tensor
from .tensor import add
from .tensor import l2_distance
from .tensor import mean_rows
from .tensor import mse
from .tensor import no_grad
from .tensor import scale
from .tensor import softmax_cross_entropy
from .tensor import take_rows

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass(frozen=True)
class RoundConfig:
    """Hyperparameters of the federated rounds.

    Attributes
    ----------
    a : float
        Mixing weight of the local prototypes, in [0, 1].
    lam : float
        Weight of the prototype-consistency regularizer, non-negative.
    local_epochs : int
        Passes over the local training split per round.
    batch_size : int
        Minibatch size, for both heads.
    lr : float
        SGD learning rate of the body and decision head.
    momentum : float
        Heavy-ball momentum, in [0, 1).
    rounds : int
        Number of rounds.
    relation_epochs : int
        Relation-head passes per round; 0 disables the relation head.
    relation_lr : float
        SGD learning rate of the relation head.
    seed : int
        Master seed all client streams derive from.
    aggregate : bool
        Whether clients upload their prototypes; without it every client trains alone.

    """

    a: float = 0.5
    lam: float = 1.0
    local_epochs: int = 1
    batch_size: int = 10
    lr: float = 0.01
    momentum: float = 0.5
    rounds: int = 30
    relation_epochs: int = 1
    relation_lr: float = 0.01
    seed: int = 0
    aggregate: bool = True

    def __post_init__(self):
        """Checks every hyperparameter range."""
        if not 0.0 <= self.a <= 1.0:
            raise ContractError(f"a must lie in [0, 1], got {self.a}")
        if not self.lam >= 0.0:
            raise ContractError(f"lam must be non-negative, got {self.lam}")
        if self.local_epochs < 1 or self.batch_size < 1 or self.rounds < 1:
            raise ContractError("local_epochs, batch_size and rounds must be at least 1")
        if self.relation_epochs < 0:
            raise ContractError(f"relation_epochs must be non-negative, got {self.relation_epochs}")
        if not self.lr > 0.0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if not self.relation_lr > 0.0:
            raise ContractError(f"relation_lr must be positive, got {self.relation_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class ClientState:
    """Everything one client owns: its data split, three networks, their optimizers and its prototypes."""

    id: int
    split: ClientSplit
    dataset: Dataset
    body: Body
    decision: DecisionHead
    relation: RelationHead
    body_opt: OptimizerState
    decision_opt: OptimizerState
    relation_opt: OptimizerState
    shuffle_rng: np.random.Generator
    relation_rng: np.random.Generator
    local_protos: PrototypeSet = field(default_factory=PrototypeSet)
    mixed_protos: PrototypeSet = field(default_factory=PrototypeSet)

    @property
    def num_classes(self) -> int:
        return self.decision.num_classes

    @property
    def parameter_count(self) -> int:
        """Body plus decision-head scalars, what a parameter-averaging scheme would upload."""
        return self.body.num_parameters() + self.decision.num_parameters()


@dataclass
class ServerState:
    """Global prototypes, the index of the last completed round and the communication ledger."""

    global_protos: PrototypeSet = field(default_factory=PrototypeSet)
    round: int = 0
    ledger: CommLedger = field(default_factory=CommLedger)


def build_clients(
    ds: Dataset,
    splits: Sequence[ClientSplit],
    body_specs: Union[BodySpec, Sequence[BodySpec]],
    cfg: RoundConfig,
    decision_hidden: Sequence[int] = (),
    relation_hidden: int = DEFAULT_RELATION_HIDDEN,
) -> list[ClientState]:
    """Creates one client per split.

    Bodies and decision heads start from the shared streams of the seed, relation
    heads and minibatch orders from the streams of each client. A client without
    test samples is reported here, once, and left out of every accuracy.

    Parameters
    ----------
    ds : Dataset
        Dataset the splits index into.
    splits : sequence of ClientSplit
        Output of the partitioner.
    body_specs : BodySpec or sequence of BodySpec
        One architecture for every client, or one per client.
    cfg : RoundConfig
        Supplies the seed and optimizer hyperparameters.
    decision_hidden : sequence of int, optional
        Hidden widths of the decision head.
    relation_hidden : int, optional
        Hidden width of the relation head.

    """
    if isinstance(body_specs, BodySpec):
        body_specs = [body_specs] * len(splits)
    if len(body_specs) != len(splits):
        raise ContractError(f"{len(body_specs)} body specs for {len(splits)} clients")
    feature_dims = {spec.feature_dim for spec in body_specs}
    if len(feature_dims) > 1:
        raise ContractError(f"clients must share the feature width, got {sorted(feature_dims)}")

    clients = []
    for split, spec in zip(splits, body_specs):
        if spec.input_dim != ds.input_dim:
            raise ContractError(
                f"client {split.client_id} body expects width {spec.input_dim}, data has {ds.input_dim}"
            )
        cid = split.client_id
        if split.test_size == 0:
            logger.warning("Client %d has no test samples, left out of the accuracy means", cid)
        body = init_body(spec, cfg.seed)
        decision = init_decision_head(spec.feature_dim, ds.num_classes, cfg.seed, decision_hidden)
        relation = init_relation_head(spec.feature_dim, cfg.seed, cid, relation_hidden)
        clients.append(
            ClientState(
                id=cid,
                split=split,
                dataset=ds,
                body=body,
                decision=decision,
                relation=relation,
                body_opt=OptimizerState.for_parameters(body.parameters(), cfg.lr, cfg.momentum),
                decision_opt=OptimizerState.for_parameters(decision.parameters(), cfg.lr, cfg.momentum),
                relation_opt=OptimizerState.for_parameters(relation.parameters(), cfg.relation_lr, cfg.momentum),
                shuffle_rng=generator(cfg.seed, Stream.SHUFFLE, cid),
                relation_rng=generator(cfg.seed, Stream.RELATION_SHUFFLE, cid),
            )
        )
    logger.info("Built %d clients for %d classes", len(clients), ds.num_classes)
    return clients


def compute_local_prototypes(client: ClientState) -> PrototypeSet:
    """Mean body output per class over the client's whole training split, counts included."""
    indices = client.split.train_indices
    if indices.size == 0:
        raise ContractError(f"client {client.id} has no training samples")
    labels = client.dataset.labels[indices]
    with no_grad():
        features = client.body.forward(take_rows(client.dataset.features, indices))
        entries = {}
        for label in np.unique(labels):
            rows = np.flatnonzero(labels == label)
            entries[int(label)] = Prototype(mean_rows(take_rows(features, rows)), int(rows.size))
    return PrototypeSet(entries)


def prototype_regularizer(h: Tensor, labels: np.ndarray, mixed: PrototypeSet) -> Optional[Tensor]:
    """Mean over the classes present in the batch of ``||mixed_j - batch mean of class j||``.

    The batch class means stay differentiable through ``h``; the mixed prototypes
    are constants. Returns None when no present class has a mixed prototype.
    """
    terms = []
    for label in np.unique(labels):
        if int(label) not in mixed:
            continue
        centroid = mean_rows(take_rows(h, np.flatnonzero(labels == label)))
        terms.append(l2_distance(centroid, Tensor(mixed.vector(int(label)))))
    if not terms:
        return None
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return scale(total, 1.0 / len(terms))


def local_objective(client: ClientState, x: Tensor, labels: np.ndarray, lam: float) -> Tensor:
    """Cross-entropy of the decision head plus ``lam`` times the prototype regularizer.

    With ``lam == 0`` or no mixed prototypes yet (first round), the objective is
    exactly the cross-entropy.
    """
    h = client.body.forward(x)
    loss = softmax_cross_entropy(client.decision.forward(h), labels)
    if lam == 0.0 or not len(client.mixed_protos):
        return loss
    penalty = prototype_regularizer(h, labels, client.mixed_protos)
    if penalty is None:
        return loss
    return add(loss, scale(penalty, lam))


def _batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(indices)
    for start in range(0, order.size, batch_size):
        yield order[start : start + batch_size]


def _gradients(params: Sequence[Tensor], grads: dict) -> list[Optional[np.ndarray]]:
    return [grads.get(p) for p in params]


def local_update(client: ClientState, cfg: RoundConfig) -> list[float]:
    """Trains body and decision head for ``cfg.local_epochs`` epochs, returning the per-batch losses."""
    features, labels = client.dataset.features, client.dataset.labels
    body_params, decision_params = client.body.parameters(), client.decision.parameters()
    trace = []
    for _ in range(cfg.local_epochs):
        for batch in _batches(client.split.train_indices, cfg.batch_size, client.shuffle_rng):
            with DiffGraph() as graph:
                loss = local_objective(client, take_rows(features, batch), labels[batch], cfg.lam)
                grads = graph.backward(loss)
            sgd_step(body_params, _gradients(body_params, grads), client.body_opt)
            sgd_step(decision_params, _gradients(decision_params, grads), client.decision_opt)
            trace.append(loss.item())
    logger.debug("client %d: %d local steps", client.id, len(trace))
    return trace


def relation_loss(client: ClientState, features: np.ndarray, labels: np.ndarray, prototypes: np.ndarray) -> Tensor:
    """Squared error between the relation scores of every (feature, prototype) pair and the one-hot labels."""
    num_classes = prototypes.shape[0]
    scores = client.relation.forward(relation_pairs(features, prototypes))
    targets = np.zeros((labels.size, num_classes))
    targets[np.arange(labels.size), labels] = 1.0
    return mse(scores, Tensor(targets.reshape(-1, 1)))


def train_relation(client: ClientState, cfg: RoundConfig) -> list[float]:
    """Trains the relation head against the mixed prototypes with the body frozen.

    Raises
    ------
    ProtocolError
        If the mixed prototypes do not cover every class.

    """
    num_classes = client.num_classes
    if not client.mixed_protos.covers(num_classes):
        raise ProtocolError(f"client {client.id} mixed prototypes do not cover all {num_classes} classes")
    prototypes = client.mixed_protos.matrix(range(num_classes))
    indices = client.split.train_indices
    with no_grad():
        features = client.body.forward(take_rows(client.dataset.features, indices)).data
    labels = client.dataset.labels[indices]
    position = np.arange(indices.size)

    params = client.relation.parameters()
    trace = []
    for _ in range(cfg.relation_epochs):
        for batch in _batches(position, cfg.batch_size, client.relation_rng):
            with DiffGraph() as graph:
                loss = relation_loss(client, features[batch], labels[batch], prototypes)
                grads = graph.backward(loss)
            sgd_step(params, _gradients(params, grads), client.relation_opt)
            trace.append(loss.item())
    return trace


def map_clients(fn: Callable[[ClientState], T], clients: Sequence[ClientState], threads: int) -> list[T]:
    """Applies ``fn`` to every client, results in client order."""
    if threads <= 1 or len(clients) <= 1:
        return [fn(c) for c in clients]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, clients))


def _train_relation_or_skip(client: ClientState, cfg: RoundConfig) -> list[float]:
    if not client.mixed_protos.covers(client.num_classes):
        missing = [j for j in range(client.num_classes) if j not in client.mixed_protos]
        logger.warning("Client %d: classes %s held by no client, relation head not trained", client.id, missing)
        return []
    return train_relation(client, cfg)


def run_round(server: ServerState, clients: Sequence[ClientState], cfg: RoundConfig, threads: int = 1) -> RoundMetrics:
    """Runs one round and evaluates every client on its test split."""
    round_index = server.round + 1
    traces = map_clients(lambda c: local_update(c, cfg), clients, threads)
    locals_ = map_clients(compute_local_prototypes, clients, threads)
    for client, protos in zip(clients, locals_):
        client.local_protos = protos

    if cfg.aggregate:
        server.global_protos = aggregate_global(UploadMsg(c.id, c.local_protos) for c in clients)
        for client in clients:
            client.mixed_protos = mix_prototypes(client.local_protos, server.global_protos, cfg.a)
        method = "pfedpm"
    else:
        for client in clients:
            client.mixed_protos = mix_prototypes(client.local_protos, client.local_protos, cfg.a)
        method = "local"

    with_relation = cfg.aggregate and cfg.relation_epochs > 0
    if with_relation:
        map_clients(lambda c: _train_relation_or_skip(c, cfg), clients, threads)

    feature_dim = clients[0].body.spec.feature_dim if clients else 0
    entry = comm_cost(
        round_index,
        {c.id: len(c.local_protos) for c in clients},
        feature_dim,
        {c.id: c.parameter_count for c in clients},
        method,
    )
    server.ledger.record(entry)
    server.round = round_index
    return collect_round_metrics(
        round_index, clients, traces, entry, server.ledger.cumulative_scalars()[-1], with_relation
    )


def run_pfedpm(
    server: ServerState, clients: Sequence[ClientState], cfg: RoundConfig, threads: int = 1
) -> list[RoundMetrics]:
    """Runs ``cfg.rounds`` rounds, returning one :class:`RoundMetrics` per round."""
    if not clients:
        raise ContractError("at least one client is needed")
    series = []
    for _ in range(cfg.rounds):
        start_time = time.perf_counter()
        series.append(run_round(server, clients, cfg, threads))
        logger.debug("Round %d took %.3f seconds", server.round, time.perf_counter() - start_time)
    return series

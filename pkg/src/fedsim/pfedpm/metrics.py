"""Per-round evaluation, communication ledger and convergence diagnostics."""
import logging
import math
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import TYPE_CHECKING
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Union

import numpy as np
import pandas as pd

from .errors import ContractError
from .errors import ProtocolError
from .models import relation_scores
from .prototypes import SCALAR_BYTES
from .prototypes import prototype_bytes
from .prototypes import prototype_scalars
from .tensor import no_grad
from .tensor import take_rows

if TYPE_CHECKING:
    from .protocol import ClientState

logger = logging.getLogger(__name__)

METHODS = ("pfedpm", "local", "fedavg")

CSV_COLUMNS = [
    "round",
    "mean_acc_decision",
    "std_acc_decision",
    "mean_acc_relation",
    "std_acc_relation",
    "mean_train_loss",
    "upload_scalars",
    "cum_upload_scalars",
]


def _mean_std(values: Mapping[int, float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    array = np.array([values[k] for k in sorted(values)])
    # population standard deviation across clients
    return float(array.mean()), float(array.std())


@dataclass
class RoundMetrics:
    """What one round produced.

    Attributes
    ----------
    round : int
        Round index, starting at 1.
    decision_accuracy : dict
        Client id to decision-head test accuracy.
    relation_accuracy : dict
        Client id to relation-head test accuracy; empty when the relation head is not in use.
    mean_train_loss : float
        Mean over clients of the mean per-batch local training loss.
    upload_scalars : int
        Scalars uploaded this round.
    cum_upload_scalars : int
        Scalars uploaded since round 1.

    """

    round: int
    decision_accuracy: dict[int, float]
    relation_accuracy: dict[int, float]
    mean_train_loss: float
    upload_scalars: int
    cum_upload_scalars: int

    def __post_init__(self):
        """Checks accuracies lie in [0, 1]."""
        for acc in (*self.decision_accuracy.values(), *self.relation_accuracy.values()):
            if not 0.0 <= acc <= 1.0:
                raise ContractError(f"accuracy {acc} outside [0, 1]")

    @property
    def decision(self) -> tuple[float, float]:
        """Mean and population standard deviation of the decision-head accuracies."""
        return _mean_std(self.decision_accuracy)

    @property
    def relation(self) -> tuple[float, float]:
        """Mean and population standard deviation of the relation-head accuracies (NaN when unused)."""
        return _mean_std(self.relation_accuracy)

    def as_row(self) -> dict:
        """One CSV row."""
        mean_decision, std_decision = self.decision
        mean_relation, std_relation = self.relation
        return {
            "round": self.round,
            "mean_acc_decision": mean_decision,
            "std_acc_decision": std_decision,
            "mean_acc_relation": mean_relation,
            "std_acc_relation": std_relation,
            "mean_train_loss": self.mean_train_loss,
            "upload_scalars": self.upload_scalars,
            "cum_upload_scalars": self.cum_upload_scalars,
        }


@dataclass(frozen=True)
class LedgerEntry:
    """Communication of one round, actual and modeled for both exchange schemes."""

    round: int
    method: str
    client_scalars: dict[int, int]
    client_bytes: dict[int, int]
    pfedpm_scalars: int
    pfedpm_bytes: int
    fedavg_scalars: int

    @property
    def upload_scalars(self) -> int:
        return sum(self.client_scalars.values())

    @property
    def upload_bytes(self) -> int:
        return sum(self.client_bytes.values())

    @property
    def ratio(self) -> Optional[float]:
        """FedAvg-equivalent scalars per prototype scalar, None when nothing would be uploaded."""
        return self.fedavg_scalars / self.pfedpm_scalars if self.pfedpm_scalars else None


@dataclass
class CommLedger:
    """Round-by-round record of what went over the (modeled) wire."""

    entries: list[LedgerEntry] = field(default_factory=list)

    def record(self, entry: LedgerEntry) -> LedgerEntry:
        """Appends the entry of the next round."""
        if self.entries and entry.round <= self.entries[-1].round:
            raise ContractError(f"ledger rounds must increase, got {entry.round} after {self.entries[-1].round}")
        self.entries.append(entry)
        return entry

    @property
    def total_scalars(self) -> int:
        return sum(e.upload_scalars for e in self.entries)

    @property
    def total_bytes(self) -> int:
        return sum(e.upload_bytes for e in self.entries)

    def cumulative_scalars(self) -> list[int]:
        """Running totals of uploaded scalars, one per round."""
        totals, running = [], 0
        for entry in self.entries:
            running += entry.upload_scalars
            totals.append(running)
        return totals


def comm_cost(
    round_index: int,
    owned_classes: Mapping[int, int],
    feature_dim: int,
    parameter_counts: Mapping[int, int],
    method: str = "pfedpm",
) -> LedgerEntry:
    """Builds the ledger entry of one round.

    Parameters
    ----------
    round_index : int
        Round the entry belongs to.
    owned_classes : mapping
        Client id to the number of classes it uploads a prototype for.
    feature_dim : int
        Prototype width ``d``.
    parameter_counts : mapping
        Client id to the number of body and decision-head parameters (what FedAvg would upload).
    method : str
        ``pfedpm`` uploads ``|classes| * (d + 1)`` scalars per client, ``fedavg`` its parameter count,
        ``local`` nothing.

    Returns
    -------
    The entry, carrying both the actual upload and the pFedPM / FedAvg comparison.

    """
    if method not in METHODS:
        raise ContractError(f"unknown method {method}, expected one of {METHODS}")
    proto_scalars = {cid: prototype_scalars(n, feature_dim) for cid, n in owned_classes.items()}
    proto_bytes = {cid: prototype_bytes(n, feature_dim) for cid, n in owned_classes.items()}

    if method == "pfedpm":
        scalars, sizes = proto_scalars, proto_bytes
    elif method == "fedavg":
        scalars = dict(parameter_counts)
        sizes = {cid: SCALAR_BYTES * n for cid, n in parameter_counts.items()}
    else:
        scalars = {cid: 0 for cid in owned_classes}
        sizes = dict(scalars)

    return LedgerEntry(
        round=round_index,
        method=method,
        client_scalars=scalars,
        client_bytes=sizes,
        pfedpm_scalars=sum(proto_scalars.values()),
        pfedpm_bytes=sum(proto_bytes.values()),
        fedavg_scalars=sum(parameter_counts.values()),
    )


def _first_argmax(values: np.ndarray) -> np.ndarray:
    # numpy returns the first maximal index, i.e. ties go to the smallest label
    return np.argmax(values, axis=1)


def _test_batch(client: "ClientState"):
    indices = client.split.test_indices
    if indices.size == 0:
        raise ContractError(f"client {client.id} has no test samples")
    return take_rows(client.dataset.features, indices), client.dataset.labels[indices]


def evaluate_decision(client: "ClientState") -> float:
    """Fraction of the client's test samples whose largest decision logit is the true label."""
    x, labels = _test_batch(client)
    with no_grad():
        logits = client.decision.forward(client.body.forward(x)).data
    return np.count_nonzero(_first_argmax(logits) == labels) / labels.size


def softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax."""
    shifted = np.exp(scores - scores.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def evaluate_relation(client: "ClientState") -> float:
    """Relation-head test accuracy against the client's mixed prototypes.

    Each test feature is scored against all C mixed prototypes; the prediction
    is the argmax of the softmaxed scores, ties going to the smallest label.
    """
    num_classes = client.num_classes
    if not client.mixed_protos.covers(num_classes):
        raise ProtocolError(f"client {client.id} mixed prototypes do not cover all {num_classes} classes")
    x, labels = _test_batch(client)
    scores = relation_scores(client.body, client.relation, x, client.mixed_protos.matrix(range(num_classes)))
    return np.count_nonzero(_first_argmax(softmax(scores)) == labels) / labels.size


def collect_round_metrics(
    round_index: int,
    clients: Sequence["ClientState"],
    traces: Sequence[Sequence[float]],
    entry: LedgerEntry,
    cumulative: int,
    with_relation: bool,
) -> RoundMetrics:
    """Evaluates every client with a test split and folds in losses and communication."""
    decision, relation = {}, {}
    for client in clients:
        if client.split.test_size == 0:
            continue
        decision[client.id] = evaluate_decision(client)
        if with_relation and client.mixed_protos.covers(client.num_classes):
            relation[client.id] = evaluate_relation(client)

    losses = [float(np.mean(trace)) for trace in traces if len(trace)]
    metrics = RoundMetrics(
        round=round_index,
        decision_accuracy=decision,
        relation_accuracy=relation,
        mean_train_loss=float(np.mean(losses)) if losses else math.nan,
        upload_scalars=entry.upload_scalars,
        cum_upload_scalars=cumulative,
    )
    logger.info(
        "round %d: decision acc %.4f, relation acc %.4f, train loss %.4f, uploaded %d scalars",
        round_index,
        metrics.decision[0],
        metrics.relation[0],
        metrics.mean_train_loss,
        metrics.upload_scalars,
    )
    return metrics


def loss_decrease_diagnostic(trace: Sequence[float]) -> float:
    """Fraction of rounds whose mean local loss is strictly below the previous round's.

    An empirical monitor of the per-round loss decrease the method is expected to show.
    """
    if len(trace) < 2:
        raise ContractError(f"the loss decrease diagnostic needs at least 2 rounds, got {len(trace)}")
    decreases = sum(1 for before, after in zip(trace[:-1], trace[1:]) if after < before)
    return decreases / (len(trace) - 1)


def metrics_frame(series: Sequence[RoundMetrics]) -> pd.DataFrame:
    """The per-round metrics as a DataFrame with the CSV columns."""
    return pd.DataFrame.from_records([m.as_row() for m in series], columns=CSV_COLUMNS)


def write_metrics_csv(series: Sequence[RoundMetrics], path: Union[str, Path]) -> Path:
    """Writes one row per round with 9 significant digits; unused relation columns stay empty."""
    path = Path(path)
    metrics_frame(series).to_csv(path, index=False, float_format="%.9g", na_rep="", lineterminator="\n")
    return path


def _finite_or_none(value: float) -> Optional[float]:
    return None if value is None or math.isnan(value) else float(value)


def summary(series: Sequence[RoundMetrics], ledger: CommLedger) -> dict:
    """Final accuracies, communication totals and diagnostics of a run, ready for JSON."""
    if not series:
        raise ContractError("cannot summarize an empty run")
    final = series[-1]
    last = ledger.entries[-1] if ledger.entries else None
    losses = [m.mean_train_loss for m in series]
    return {
        "rounds": final.round,
        "decision_accuracy": {"mean": _finite_or_none(final.decision[0]), "std": _finite_or_none(final.decision[1])},
        "relation_accuracy": {"mean": _finite_or_none(final.relation[0]), "std": _finite_or_none(final.relation[1])},
        "final_mean_train_loss": _finite_or_none(final.mean_train_loss),
        "total_upload_scalars": ledger.total_scalars,
        "total_upload_bytes": ledger.total_bytes,
        "pfedpm_scalars_per_round": last.pfedpm_scalars if last else None,
        "fedavg_scalars_per_round": last.fedavg_scalars if last else None,
        "fedavg_to_pfedpm_ratio": last.ratio if last else None,
        "loss_decrease_fraction": loss_decrease_diagnostic(losses) if len(losses) > 1 else None,
    }

"""Per-class prototype sets: the currency clients and server exchange each round."""
import logging
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Iterable
from typing import Iterator
from typing import Optional

import numpy as np

from .errors import ContractError
from .errors import ProtocolError
from .tensor import Tensor

logger = logging.getLogger(__name__)

LABEL_BYTES = 4
COUNT_BYTES = 8
SCALAR_BYTES = 8


def prototype_scalars(num_classes: int, dim: int) -> int:
    """Scalars on the wire for ``num_classes`` prototypes of width ``dim``: the vector plus the count, per class."""
    return num_classes * (dim + 1)


def prototype_bytes(num_classes: int, dim: int) -> int:
    """Modeled message size: label id, count and vector per class."""
    return num_classes * (LABEL_BYTES + COUNT_BYTES + SCALAR_BYTES * dim)


@dataclass(frozen=True)
class Prototype:
    """Feature vector of one class and the number of samples it summarizes."""

    vector: Tensor
    count: int


class PrototypeSet(Mapping):
    """Label to :class:`Prototype` mapping, iterated in ascending label order.

    Every vector has the same length and every count is at least 1: a class
    without samples is absent, never present with a zero count.
    """

    def __init__(self, entries: Optional[Mapping[int, Prototype]] = None):
        """Creates the set, validating vector lengths and counts."""
        entries = dict(entries or {})
        dims = set()
        for label, proto in entries.items():
            if proto.vector.data.ndim != 1:
                raise ProtocolError(f"prototype of class {label} is not a vector: shape {proto.vector.shape}")
            if proto.count < 1:
                raise ProtocolError(f"prototype of class {label} has count {proto.count}")
            dims.add(proto.vector.shape[0])
        if len(dims) > 1:
            raise ProtocolError(f"prototype vectors of different lengths: {sorted(dims)}")
        self._entries = {int(label): entries[label] for label in sorted(entries)}
        self._dim = dims.pop() if dims else None

    @classmethod
    def from_arrays(cls, entries: Mapping[int, tuple]) -> "PrototypeSet":
        """Builds a set from ``{label: (vector, count)}``."""
        return cls({label: Prototype(Tensor(vector), int(count)) for label, (vector, count) in entries.items()})

    def __getitem__(self, label: int) -> Prototype:
        """Prototype of ``label``."""
        return self._entries[label]

    def __iter__(self) -> Iterator[int]:
        """Labels in ascending order."""
        return iter(self._entries)

    def __len__(self):
        """Number of classes present."""
        return len(self._entries)

    def __repr__(self):
        """Labels and width."""
        return f"PrototypeSet(labels={list(self._entries)}, dim={self._dim})"

    @property
    def dim(self) -> Optional[int]:
        """Vector length, None for an empty set."""
        return self._dim

    def covers(self, num_classes: int) -> bool:
        """Whether every class of ``range(num_classes)`` is present."""
        return all(j in self._entries for j in range(num_classes))

    def vector(self, label: int) -> np.ndarray:
        return self._entries[label].vector.data

    def matrix(self, labels: Iterable[int]) -> np.ndarray:
        """Stacks the vectors of ``labels`` into a len(labels)×d array."""
        return np.stack([self.vector(j) for j in labels])

    def scalar_count(self) -> int:
        """Scalars this set takes on the wire."""
        return prototype_scalars(len(self), self._dim or 0)

    def byte_size(self) -> int:
        return prototype_bytes(len(self), self._dim or 0)


@dataclass(frozen=True)
class UploadMsg:
    """Local prototypes sent by one client to the server."""

    client_id: int
    prototypes: PrototypeSet


def aggregate_global(uploads: Iterable[UploadMsg]) -> PrototypeSet:
    """Count-weighted mean of the uploaded prototypes, class by class.

    For each class ``j`` owned by at least one client, the global prototype is
    ``sum_i (n_ij / N_j) * C_ij`` with ``N_j = sum_i n_ij``, summed in ascending
    client id order; the stored count is ``N_j``.

    Raises
    ------
    ProtocolError
        Vectors of different lengths across uploads, or a client uploading twice.

    """
    ordered = sorted(uploads, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate uploads from clients {sorted({i for i in ids if ids.count(i) > 1})}")
    dims = {u.prototypes.dim for u in ordered if u.prototypes.dim is not None}
    if len(dims) > 1:
        raise ProtocolError(f"uploads disagree on prototype length: {sorted(dims)}")

    dim = next(iter(dims), 0)
    labels = sorted({label for u in ordered for label in u.prototypes})
    entries = {}
    for label in labels:
        owners = [u.prototypes[label] for u in ordered if label in u.prototypes]
        total = sum(p.count for p in owners)
        vector = np.zeros(dim)
        for proto in owners:
            vector = vector + (proto.count / total) * proto.vector.data
        entries[label] = Prototype(Tensor(vector), total)
    logger.debug("aggregated %d classes from %d uploads", len(entries), len(ordered))
    return PrototypeSet(entries)


def mix_prototypes(local: PrototypeSet, global_: PrototypeSet, a: float) -> PrototypeSet:
    """Personalized prototypes ``a * local + (1 - a) * global`` on owned classes, global elsewhere.

    Raises
    ------
    ContractError
        If ``a`` lies outside [0, 1].
    ProtocolError
        If a locally owned class is missing from ``global_``.

    """
    if not 0.0 <= a <= 1.0:
        raise ContractError(f"mixing weight a must lie in [0, 1], got {a}")
    missing = [label for label in local if label not in global_]
    if missing:
        raise ProtocolError(f"global prototypes lack locally owned classes {missing}")
    entries = {}
    for label, proto in global_.items():
        if label in local:
            mixed = a * local.vector(label) + (1.0 - a) * proto.vector.data
            entries[label] = Prototype(Tensor(mixed), local[label].count)
        else:
            entries[label] = proto
    return PrototypeSet(entries)

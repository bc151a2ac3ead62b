"""Datasets and label-distribution-skew partitioning across clients."""
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional
from typing import Union

import numpy as np
import pandas as pd

from .errors import ContractError
from .errors import DataFormatError
from .streams import Stream
from .streams import generator
from .tensor import Tensor

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TEST_FRACTION_DIVISOR = 5
"""One sample out of five per class and client is held out for testing (floored)."""


@dataclass(frozen=True)
class Dataset:
    """Labelled samples shared read-only by every client.

    Attributes
    ----------
    features : Tensor
        N×input_dim sample matrix.
    labels : numpy.ndarray
        N integer labels in [0, num_classes).
    num_classes : int
        Class count C.

    """

    features: Tensor
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        """Checks labels against the feature rows and the class count."""
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if self.features.data.ndim != 2 or labels.shape != (self.features.shape[0],):
            raise ContractError(f"{labels.shape} labels do not match features of shape {self.features.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        """Number of samples."""
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]


def _read_header(buffer: bytes, path: Path, magic: int, ndims: int) -> list[int]:
    header_size = 4 * (1 + ndims)
    if len(buffer) < header_size:
        raise DataFormatError(f"{path}: truncated IDX header", offset=len(buffer))
    found = struct.unpack_from(">I", buffer, 0)[0]
    if found != magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    return list(struct.unpack_from(f">{ndims}I", buffer, 4))


def load_mnist_idx(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    num_classes: int = 10,
    limit: Optional[int] = None,
) -> Dataset:
    """Loads an IDX image file and its label file.

    Parameters
    ----------
    images_path : str or Path
        Big-endian IDX file of unsigned bytes with magic 0x00000803 and dims [n, rows, cols].
    labels_path : str or Path
        Big-endian IDX file of unsigned bytes with magic 0x00000801 and dims [n].
    num_classes : int, optional
        Class count C, 10 for MNIST.
    limit : int, optional
        Keep only the first ``limit`` records (desk-scale subsets).

    Returns
    -------
    A dataset with one flattened row per image, pixels scaled into [0, 1].

    Raises
    ------
    DataFormatError
        Bad magic number, truncated payload, image/label count mismatch or an out-of-range label.

    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    image_bytes = images_path.read_bytes()
    label_bytes = labels_path.read_bytes()

    count, rows, cols = _read_header(image_bytes, images_path, IDX_IMAGES_MAGIC, 3)
    (label_count,) = _read_header(label_bytes, labels_path, IDX_LABELS_MAGIC, 1)
    if count != label_count:
        raise DataFormatError(f"{images_path} holds {count} images but {labels_path} holds {label_count} labels", 4)

    pixels_per_image = rows * cols
    expected = 16 + count * pixels_per_image
    if len(image_bytes) < expected:
        raise DataFormatError(
            f"{images_path}: truncated payload, expected {expected} bytes, found {len(image_bytes)}",
            offset=len(image_bytes),
        )
    if len(label_bytes) < 8 + count:
        raise DataFormatError(
            f"{labels_path}: truncated payload, expected {8 + count} bytes, found {len(label_bytes)}",
            offset=len(label_bytes),
        )

    kept = count if limit is None else min(count, int(limit))
    pixels = np.frombuffer(image_bytes, dtype=np.uint8, count=kept * pixels_per_image, offset=16)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=kept, offset=8).astype(np.int64)
    out_of_range = np.flatnonzero(labels >= num_classes)
    if out_of_range.size:
        raise DataFormatError(
            f"{labels_path}: label {labels[out_of_range[0]]} outside [0, {num_classes})",
            offset=8 + int(out_of_range[0]),
        )

    logger.info("Loaded %d of %d %dx%d images from %s", kept, count, rows, cols, images_path)
    features = Tensor(pixels.reshape(kept, pixels_per_image) / 255.0)
    return Dataset(features, labels, num_classes)


def synth_blobs(
    num_classes: int, input_dim: int, per_class: int, cluster_std: float, seed: int, scale: float = 1.0
) -> Dataset:
    """Gaussian blobs centred on distinct corners of the hypercube ``[0, scale]^input_dim``.

    Class ``j`` samples are drawn from Normal(mu_j, cluster_std² I); samples come grouped by class.
    """
    if num_classes < 1 or input_dim < 1 or per_class < 1 or cluster_std < 0 or scale <= 0:
        raise ContractError("synth_blobs needs positive sizes, a positive scale and a non-negative spread")
    if input_dim < 63 and 2**input_dim < num_classes:
        raise ContractError(f"a {input_dim}-cube has fewer than {num_classes} corners")

    rng = generator(seed, Stream.BLOBS)
    corners: list[np.ndarray] = []
    seen = set()
    while len(corners) < num_classes:
        bits = rng.integers(0, 2, size=input_dim)
        if bits.tobytes() in seen:
            continue
        seen.add(bits.tobytes())
        corners.append(bits * float(scale))

    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.standard_normal((labels.size, input_dim))
    features = np.asarray(corners)[labels] + cluster_std * noise
    return Dataset(Tensor(features), labels, num_classes)


@dataclass(frozen=True)
class SkewSpec:
    """Label-skew parameters: client count, mean classes per client, mean samples per class and their noise."""

    num_clients: int
    n_mean: float
    k_mean: float
    stdev: float = 0.0
    seed: int = 0

    def validate(self, num_classes: int):
        """Raises ContractError unless these parameters fit a dataset of ``num_classes`` classes."""
        if self.num_clients < 1:
            raise ContractError(f"at least one client is needed, got {self.num_clients}")
        if not 1 <= self.n_mean <= num_classes:
            raise ContractError(f"n_mean must lie in [1, {num_classes}], got {self.n_mean}")
        if self.k_mean < 1:
            raise ContractError(f"k_mean must be at least 1, got {self.k_mean}")
        if self.stdev < 0:
            raise ContractError(f"stdev must be non-negative, got {self.stdev}")


@dataclass(frozen=True)
class ClientSplit:
    """Indices into the parent dataset owned by one client."""

    client_id: int
    classes: tuple[int, ...]
    train_indices: np.ndarray
    test_indices: np.ndarray

    @property
    def train_size(self) -> int:
        return int(self.train_indices.size)

    @property
    def test_size(self) -> int:
        return int(self.test_indices.size)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _clamp(value: int, low: int, high: int) -> int:
    return max(low, min(high, value))


def _draw(pool: list[int], k: int, class_indices: np.ndarray, rng: np.random.Generator) -> list[int]:
    taken = pool[:k]
    del pool[:k]
    if len(taken) < k:
        # pool exhausted: start a fresh permutation, never handing a sample twice to the same client
        already = set(taken)
        pool[:] = [int(i) for i in rng.permutation(class_indices) if int(i) not in already]
        missing = k - len(taken)
        taken += pool[:missing]
        del pool[:missing]
    return taken


def partition_label_skew(ds: Dataset, spec: SkewSpec) -> list[ClientSplit]:
    """Deals samples to clients with skewed class sets and skewed per-class sizes.

    For client ``i``: ``n_i = clamp(round(n_mean + N(0, stdev)), 1, C)`` classes drawn without
    replacement, then for each class ``k = clamp(round(k_mean + N(0, stdev * k_mean / n_mean)), 1, available)``
    samples taken without replacement from a per-class pool, which is only refilled (reusing samples
    across clients) once exhausted. Each class is then split with ``k // 5`` samples held out for testing.

    Raises
    ------
    ContractError
        Empty dataset, no class, or a spec that does not fit the dataset.

    """
    num_classes = ds.num_classes
    if num_classes < 1 or len(ds) == 0:
        raise ContractError("cannot partition an empty dataset")
    spec.validate(num_classes)

    class_indices = [np.flatnonzero(ds.labels == j) for j in range(num_classes)]
    candidates = np.array([j for j in range(num_classes) if class_indices[j].size])
    pool_rng = generator(spec.seed, Stream.POOL)
    pools = [[int(i) for i in pool_rng.permutation(indices)] for indices in class_indices]
    k_stdev = spec.stdev * spec.k_mean / spec.n_mean

    splits = []
    for client in range(spec.num_clients):
        rng = generator(spec.seed, Stream.PARTITION, client)
        n = _clamp(_round_half_up(spec.n_mean + rng.normal(0.0, spec.stdev)), 1, num_classes)
        n = min(n, candidates.size)
        classes = np.sort(rng.choice(candidates, size=n, replace=False))

        train, test = [], []
        for j in classes:
            available = class_indices[j].size
            k = _clamp(_round_half_up(spec.k_mean + rng.normal(0.0, k_stdev)), 1, available)
            drawn = _draw(pools[j], k, class_indices[j], pool_rng)
            held_out = k // TEST_FRACTION_DIVISOR
            test += drawn[:held_out]
            train += drawn[held_out:]

        splits.append(
            ClientSplit(
                client_id=client,
                classes=tuple(int(j) for j in classes),
                train_indices=np.sort(np.asarray(train, dtype=np.int64)),
                test_indices=np.sort(np.asarray(test, dtype=np.int64)),
            )
        )
        logger.debug("client %d: classes %s, %d train, %d test", client, classes.tolist(), len(train), len(test))

    return splits


def client_class_counts(split: ClientSplit, ds: Dataset) -> dict[int, int]:
    """Training label counts of one client, keyed by label in ascending order."""
    labels, counts = np.unique(ds.labels[split.train_indices], return_counts=True)
    return {int(label): int(count) for label, count in zip(labels, counts)}


def partition_manifest(splits: list[ClientSplit]) -> list[dict]:
    """JSON-ready description of a partition, for reproducibility audits."""
    return [
        {
            "client_id": s.client_id,
            "classes": list(s.classes),
            "train_indices": s.train_indices.tolist(),
            "test_indices": s.test_indices.tolist(),
        }
        for s in splits
    ]


def write_partition_manifest(splits: list[ClientSplit], path: Union[str, Path]) -> Path:
    """Writes :func:`partition_manifest` as JSON."""
    path = Path(path)
    path.write_text(json.dumps({"clients": partition_manifest(splits)}, sort_keys=True) + "\n")
    return path


def partition_summary(splits: list[ClientSplit], ds: Dataset) -> pd.DataFrame:
    """One row per client: class count, classes, train and test sizes."""
    records = [
        {
            "num_classes": len(s.classes),
            "classes": " ".join(str(j) for j in s.classes),
            "train_size": s.train_size,
            "test_size": s.test_size,
            "smallest_class": min(client_class_counts(s, ds).values(), default=0),
        }
        for s in splits
    ]
    return pd.DataFrame.from_records(records, index=[s.client_id for s in splits]).rename_axis("client_id")

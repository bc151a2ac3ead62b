"""Small federations shared by the tests."""
import struct
from pathlib import Path

import numpy as np
from fedsim.pfedpm.data import ClientSplit
from fedsim.pfedpm.data import SkewSpec
from fedsim.pfedpm.data import partition_label_skew
from fedsim.pfedpm.data import synth_blobs
from fedsim.pfedpm.models import BodySpec
from fedsim.pfedpm.protocol import RoundConfig
from fedsim.pfedpm.protocol import build_clients

NUM_CLASSES = 4
INPUT_DIM = 6
FEATURE_DIM = 5


def small_dataset(seed: int = 3):
    return synth_blobs(NUM_CLASSES, INPUT_DIM, per_class=40, cluster_std=0.3, seed=seed)


def small_federation(cfg: RoundConfig = None, num_clients: int = 3, stdev: float = 0.0, hidden=(8,)):
    """Blobs dataset, its label-skew partition and freshly built clients."""
    cfg = cfg or RoundConfig(rounds=2, seed=7)
    ds = small_dataset()
    splits = partition_label_skew(ds, SkewSpec(num_clients, n_mean=2, k_mean=10, stdev=stdev, seed=cfg.seed))
    clients = build_clients(ds, splits, BodySpec(INPUT_DIM, hidden, FEATURE_DIM), cfg, relation_hidden=4)
    return ds, splits, clients


def disjoint_federation(cfg: RoundConfig = None):
    """Two clients, one holding classes 0 and 1, the other classes 2 and 3."""
    cfg = cfg or RoundConfig(rounds=1, seed=11)
    ds = small_dataset()
    splits = []
    for cid, classes in enumerate(((0, 1), (2, 3))):
        train, test = [], []
        for j in classes:
            rows = np.flatnonzero(ds.labels == j)
            train += rows[:10].tolist()
            test += rows[10:13].tolist()
        splits.append(ClientSplit(cid, classes, np.array(train), np.array(test)))
    clients = build_clients(ds, splits, BodySpec(INPUT_DIM, (8,), FEATURE_DIM), cfg, relation_hidden=4)
    return ds, splits, clients


def parameter_values(clients, networks=("body", "decision")):
    return [p.data.copy() for c in clients for name in networks for p in getattr(c, name).parameters()]


def write_idx(directory: Path, images: np.ndarray, labels: np.ndarray, image_magic=0x803, label_magic=0x801):
    """Writes an IDX image file and label file, returning both paths."""
    count, rows, cols = images.shape
    images_path = directory / "images-idx3-ubyte"
    labels_path = directory / "labels-idx1-ubyte"
    images_path.write_bytes(struct.pack(">IIII", image_magic, count, rows, cols) + images.astype(np.uint8).tobytes())
    labels_path.write_bytes(struct.pack(">II", label_magic, labels.size) + labels.astype(np.uint8).tobytes())
    return images_path, labels_path

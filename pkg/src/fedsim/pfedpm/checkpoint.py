"""Export of server and client state as flat binary tensors with a JSON manifest."""
import hashlib
import json
import logging
from pathlib import Path
from typing import Sequence
from typing import Union

import numpy as np

from .protocol import ClientState
from .protocol import ServerState

logger = logging.getLogger(__name__)

DTYPE = "<f8"
MANIFEST_NAME = "manifest.json"


def _write_tensor(directory: Path, name: str, values: np.ndarray) -> dict:
    payload = np.ascontiguousarray(values, dtype=DTYPE).tobytes()
    (directory / f"{name}.bin").write_bytes(payload)
    return {
        "file": f"{name}.bin",
        "shape": list(np.shape(values)),
        "dtype": DTYPE,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }


def _write_prototypes(directory: Path, prefix: str, protos) -> dict:
    return {
        str(label): {"count": proto.count, **_write_tensor(directory, f"{prefix}_class{label}", proto.vector.data)}
        for label, proto in protos.items()
    }


def export_checkpoint(server: ServerState, clients: Sequence[ClientState], directory: Union[str, Path]) -> Path:
    """Writes every network parameter and prototype vector to ``directory``.

    Each tensor becomes ``<name>.bin``, little-endian float64 in row-major
    order; ``manifest.json`` lists the shape, dtype and SHA-256 of each file.

    Returns
    -------
    Path of the manifest.

    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    manifest = {
        "round": server.round,
        "global_prototypes": _write_prototypes(directory, "global", server.global_protos),
        "clients": [],
    }
    for client in clients:
        networks = {}
        for name, network in (("body", client.body), ("decision", client.decision), ("relation", client.relation)):
            networks[name] = [
                _write_tensor(directory, f"client{client.id}_{name}_{i}", p.data)
                for i, p in enumerate(network.parameters())
            ]
        manifest["clients"].append(
            {
                "client_id": client.id,
                "networks": networks,
                "local_prototypes": _write_prototypes(directory, f"client{client.id}_local", client.local_protos),
                "mixed_prototypes": _write_prototypes(directory, f"client{client.id}_mixed", client.mixed_protos),
            }
        )

    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info("Checkpoint of round %d written to %s", server.round, directory)
    return path

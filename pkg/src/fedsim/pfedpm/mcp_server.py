"""Model Context Protocol (MCP) server."""
import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Optional

from fastmcp import FastMCP

from .config import ExperimentConfig
from .config import apply_preset
from .metrics import comm_cost
from .models import BodySpec
from .models import init_body
from .models import init_decision_head
from .runner import SUMMARY_FILE
from .runner import run_experiment

logger = logging.getLogger(__name__)


def estimate_communication(
    num_clients: int = 20,
    classes_per_client: int = 3,
    feature_dim: int = 50,
    input_dim: int = 784,
    hidden_dims: Optional[list[int]] = None,
    num_classes: int = 10,
) -> dict:
    """Scalars uploaded per round by prototype exchange and by parameter averaging (FedAvg).

    Every client uploads ``classes_per_client * (feature_dim + 1)`` scalars with prototypes, or the
    full parameter count of its body (input_dim → hidden_dims → feature_dim) and linear decision head.

    :param num_clients: number of participating clients
    :param classes_per_client: classes owned by each client
    :param feature_dim: prototype width
    :param input_dim: width of a raw sample, 784 for MNIST
    :param hidden_dims: hidden widths of the body, [128] by default
    :param num_classes: number of classes
    :return: per-round scalars and bytes of both schemes and their ratio
    """
    spec = BodySpec(input_dim, tuple(hidden_dims if hidden_dims is not None else [128]), feature_dim)
    body = init_body(spec, seed=0)
    per_client = body.num_parameters() + init_decision_head(feature_dim, num_classes, seed=0).num_parameters()
    entry = comm_cost(
        1,
        {i: classes_per_client for i in range(num_clients)},
        feature_dim,
        {i: per_client for i in range(num_clients)},
    )
    return {
        "pfedpm_scalars_per_round": entry.pfedpm_scalars,
        "pfedpm_bytes_per_round": entry.pfedpm_bytes,
        "fedavg_scalars_per_round": entry.fedavg_scalars,
        "fedavg_parameters_per_client": per_client,
        "fedavg_to_pfedpm_ratio": entry.ratio,
    }


def run_preset(preset: str, seed: int = 0, out_dir: str = "runs/mcp", rounds: Optional[int] = None) -> dict:
    """Runs a preset experiment and returns its summary (final accuracies, communication totals).

    :param preset: preset name, e.g. blobs-smoke, blobs-skew, mnist-skew-n3
    :param seed: master seed
    :param out_dir: directory receiving metrics.csv, summary.json, partition.json and manifest.json
    :param rounds: number of rounds, the preset's own when omitted
    :return: content of summary.json
    """
    cfg = replace(apply_preset(ExperimentConfig(), preset), seed=seed, out_dir=out_dir)
    if rounds is not None:
        cfg = replace(cfg, rounds=rounds)
    run_experiment(cfg)
    return json.loads((Path(out_dir) / SUMMARY_FILE).read_text(encoding="utf-8"))


def main():
    """Main entry point, to launch the service.

    Only connects documented library entry points as tools.
    """
    parser = argparse.ArgumentParser(description="Run the pFedPM simulation MCP server")
    parser.add_argument("--transport", default="stdio", help="Transport method (http, stdio, etc)")
    args = parser.parse_args()

    mcp = FastMCP("pFedPM federated learning simulator")
    mcp.tool(estimate_communication)
    mcp.tool(run_preset)
    mcp.run(transport=args.transport)


if __name__ == "__main__":
    main()

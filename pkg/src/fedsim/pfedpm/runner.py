"""End-to-end experiments: dataset, partition, clients, rounds and the files they leave behind."""
import hashlib
import json
import logging
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from importlib.resources import files
from pathlib import Path
from typing import Optional
from typing import Sequence
from typing import Union

import pandas as pd

from .baselines import run_fedavg_baseline
from .baselines import run_local_baseline
from .checkpoint import export_checkpoint
from .config import ExperimentConfig
from .config import dump_config
from .config import loads_config
from .config import validate
from .data import ClientSplit
from .data import Dataset
from .data import load_mnist_idx
from .data import partition_label_skew
from .data import partition_summary
from .data import synth_blobs
from .data import write_partition_manifest
from .errors import ContractError
from .errors import PFedPMError
from .metrics import summary
from .metrics import write_metrics_csv
from .protocol import ServerState
from .protocol import build_clients
from .protocol import run_pfedpm
from .streams import stream_ids

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
MANIFEST_FILE = "manifest.json"
PARTITION_FILE = "partition.json"
SWEEP_FILE = "sweep.csv"

SWEEPABLE = {"a": "a", "lam": "lam", "lambda": "lam", "stdev": "stdev", "n_mean": "n_mean"}


def version() -> str:
    """Version of this package."""
    return files("fedsim.pfedpm").joinpath("VERSION.txt").read_text(encoding="utf-8").strip()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunManifest:
    """What is needed to reproduce a run and check that it was reproduced.

    Attributes
    ----------
    config : str
        Resolved configuration in the config file grammar.
    version : str
        Package version that produced the outputs.
    seed : int
        Master seed.
    streams : dict
        Random stream name to the id mixed into every per-client seed.
    outputs : dict
        Output file name to its SHA-256.

    """

    config: str
    version: str
    seed: int
    streams: dict[str, int] = field(default_factory=stream_ids)
    outputs: dict[str, str] = field(default_factory=dict)

    def write(self, path: Union[str, Path]) -> Path:
        """Saves the manifest as JSON."""
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "RunManifest":
        """Loads a manifest written by :meth:`write`."""
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def experiment_config(self, check_files: bool = True) -> ExperimentConfig:
        """The configuration snapshot, parsed back."""
        return loads_config(self.config, check_files=check_files)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    """Loads or generates the configured dataset."""
    if cfg.dataset == "mnist":
        return load_mnist_idx(cfg.mnist_images, cfg.mnist_labels, cfg.num_classes, cfg.mnist_limit or None)
    return synth_blobs(
        cfg.blobs_classes, cfg.blobs_input_dim, cfg.blobs_per_class, cfg.blobs_std, cfg.seed, cfg.blobs_scale
    )


def _partition(cfg: ExperimentConfig) -> tuple[Dataset, list[ClientSplit]]:
    ds = build_dataset(cfg)
    return ds, partition_label_skew(ds, cfg.skew_spec())


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    """Runs the configured method and writes metrics, summary, partition and manifest to ``cfg.out_dir``.

    Errors of this package are re-raised with a note naming the experiment.
    """
    out = Path(cfg.out_dir)
    try:
        validate(cfg)
        out.mkdir(parents=True, exist_ok=True)
        ds, splits = _partition(cfg)
        write_partition_manifest(splits, out / PARTITION_FILE)

        round_cfg = cfg.round_config()
        clients = build_clients(
            ds, splits, cfg.body_specs(ds.input_dim), round_cfg, cfg.decision_hidden_dims, cfg.relation_hidden
        )
        server = ServerState()
        logger.info("Running %s on %d clients for %d rounds", cfg.method, len(clients), cfg.rounds)
        if cfg.method == "pfedpm":
            series = run_pfedpm(server, clients, round_cfg, cfg.threads)
        elif cfg.method == "local":
            series = run_local_baseline(clients, round_cfg, cfg.threads, server)
        else:
            series = run_fedavg_baseline(clients, round_cfg, cfg.threads, server)

        write_metrics_csv(series, out / METRICS_FILE)
        report = {"method": cfg.method, "seed": cfg.seed, **summary(series, server.ledger)}
        (out / SUMMARY_FILE).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if cfg.checkpoint:
            export_checkpoint(server, clients, out / "checkpoint")
    except PFedPMError as e:
        e.add_note(f"while running {cfg.method} on {cfg.dataset} with seed {cfg.seed} into {out}")
        raise

    manifest = RunManifest(
        config=dump_config(cfg),
        version=version(),
        seed=cfg.seed,
        outputs={name: _sha256(out / name) for name in (METRICS_FILE, SUMMARY_FILE, PARTITION_FILE)},
    )
    manifest.write(out / MANIFEST_FILE)
    logger.info("Outputs written to %s", out)
    return manifest


def sweep(cfg: ExperimentConfig, parameter: str, values: Sequence[float]) -> pd.DataFrame:
    """One run per value of ``parameter``, each in its own ``<parameter>=<value>`` subdirectory.

    Parameters
    ----------
    cfg : ExperimentConfig
        Base configuration; its ``out_dir`` holds the subdirectories and ``sweep.csv``.
    parameter : str
        One of ``a``, ``lam`` (or ``lambda``), ``stdev`` and ``n_mean``.
    values : sequence of float
        Values to run.

    Returns
    -------
    The per-round metrics of every run, keyed by the parameter value in the first column.

    """
    if parameter not in SWEEPABLE:
        raise ContractError(f"cannot sweep {parameter!r}, expected one of {sorted(SWEEPABLE)}")
    if not values:
        raise ContractError("a sweep needs at least one value")
    key = SWEEPABLE[parameter]
    frames = []
    for value in values:
        run_cfg = replace(cfg, **{key: float(value)}, out_dir=str(Path(cfg.out_dir) / f"{key}={value}"))
        run_experiment(run_cfg)
        frame = pd.read_csv(Path(run_cfg.out_dir) / METRICS_FILE)
        frame.insert(0, key, float(value))
        frames.append(frame)
    combined = pd.concat(frames, ignore_index=True)
    combined.to_csv(Path(cfg.out_dir) / SWEEP_FILE, index=False, float_format="%.9g", na_rep="", lineterminator="\n")
    return combined


def replay(
    manifest_path: Union[str, Path], out_dir: Optional[Union[str, Path]] = None, threads: Optional[int] = None
) -> list[str]:
    """Reruns the experiment of a manifest and lists the outputs whose checksum differs.

    The replay goes to ``out_dir``, by default a ``replay`` directory next to the manifest,
    optionally with another number of worker threads.
    """
    manifest_path = Path(manifest_path)
    recorded = RunManifest.read(manifest_path)
    if recorded.version != version():
        logger.warning("Manifest was written by version %s, replaying with %s", recorded.version, version())
    target = Path(out_dir) if out_dir is not None else manifest_path.parent / "replay"
    cfg = replace(recorded.experiment_config(check_files=False), out_dir=str(target))
    if threads is not None:
        cfg = replace(cfg, threads=threads)
    fresh = run_experiment(cfg)
    mismatches = [name for name, digest in recorded.outputs.items() if fresh.outputs.get(name) != digest]
    if mismatches:
        logger.error("Replay of %s differs in %s", manifest_path, ", ".join(mismatches))
    else:
        logger.info("Replay of %s reproduced every output", manifest_path)
    return mismatches


def inspect_partition(cfg: ExperimentConfig) -> pd.DataFrame:
    """Writes ``partition.json`` to ``cfg.out_dir`` and returns the per-client summary table."""
    validate(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, splits = _partition(cfg)
    write_partition_manifest(splits, out / PARTITION_FILE)
    return partition_summary(splits, ds)

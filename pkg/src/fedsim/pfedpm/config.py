"""Experiment configuration: flat ``key = value`` files, presets and validation.

Grammar
-------
One ``key = value`` per line, UTF-8. ``#`` starts a comment, blank lines are
ignored, lists are comma separated, booleans are ``true`` or ``false``, and a
key may appear only once. Unknown keys are rejected with the closest known key
as a suggestion.

Values are resolved in this order, later ones winning: dataclass defaults,
``--preset``, the ``--config`` file, then the ``--seed``, ``--out`` and
``--threads`` flags.
"""
import logging
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
from dataclasses import replace
from pathlib import Path
from typing import Any
from typing import Optional
from typing import Union

from rapidfuzz.distance import Levenshtein

from .data import SkewSpec
from .errors import ConfigError
from .errors import ContractError
from .metrics import METHODS
from .models import DEFAULT_FEATURE_DIM
from .models import DEFAULT_RELATION_HIDDEN
from .models import BodySpec
from .protocol import RoundConfig

logger = logging.getLogger(__name__)

DATASETS = ("blobs", "mnist")
MNIST_CLASSES = 10
SUGGESTION_THRESHOLD = 0.5


def _opt(default, help_text: str):
    return field(default=default, metadata={"help": help_text})


@dataclass(frozen=True)
class ExperimentConfig:
    """Every setting of one experiment; field names are the config file keys."""

    dataset: str = _opt("blobs", "data source, blobs or mnist")
    mnist_images: str = _opt("", "IDX image file (dataset = mnist)")
    mnist_labels: str = _opt("", "IDX label file (dataset = mnist)")
    mnist_limit: int = _opt(0, "keep the first N MNIST records, 0 keeps all")
    blobs_classes: int = _opt(10, "number of blob classes")
    blobs_input_dim: int = _opt(20, "width of a blob sample")
    blobs_per_class: int = _opt(200, "samples generated per blob class")
    blobs_std: float = _opt(0.6, "standard deviation of each blob")
    blobs_scale: float = _opt(1.0, "edge length of the hypercube holding the blob centres")
    clients: int = _opt(20, "number of clients")
    n_mean: float = _opt(3.0, "mean number of classes per client")
    k_mean: float = _opt(25.0, "mean number of samples per class and client, test samples included")
    stdev: float = _opt(2.0, "skew noise on the number of classes (scaled by k_mean / n_mean for sample counts)")
    hidden_dims: tuple[int, ...] = _opt((128,), "hidden widths of the body")
    client_hidden_dims: tuple[int, ...] = _opt(
        (), "per-client width of a single hidden body layer, assigned cyclically; overrides hidden_dims"
    )
    feature_dim: int = _opt(DEFAULT_FEATURE_DIM, "prototype width d")
    decision_hidden_dims: tuple[int, ...] = _opt((), "hidden widths of the decision head")
    relation_hidden: int = _opt(DEFAULT_RELATION_HIDDEN, "hidden width of the relation head")
    a: float = _opt(0.5, "weight of the local prototypes when mixing, in [0, 1]")
    lam: float = _opt(1.0, "weight of the prototype regularizer")
    local_epochs: int = _opt(1, "local epochs per round")
    batch_size: int = _opt(10, "minibatch size")
    lr: float = _opt(0.01, "learning rate of the body and decision head")
    momentum: float = _opt(0.5, "SGD momentum")
    rounds: int = _opt(30, "number of rounds")
    relation_epochs: int = _opt(1, "relation-head epochs per round, 0 disables it")
    relation_lr: float = _opt(0.01, "learning rate of the relation head")
    method: str = _opt("pfedpm", "pfedpm, local or fedavg")
    out_dir: str = _opt("runs/pfedpm", "output directory")
    seed: int = _opt(0, "master seed")
    threads: int = _opt(1, "worker threads for client work")
    checkpoint: bool = _opt(False, "export the final state next to the metrics")

    @property
    def num_classes(self) -> int:
        return MNIST_CLASSES if self.dataset == "mnist" else self.blobs_classes

    def round_config(self) -> RoundConfig:
        """Hyperparameters of the rounds."""
        return RoundConfig(
            a=self.a,
            lam=self.lam,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            rounds=self.rounds,
            relation_epochs=self.relation_epochs,
            relation_lr=self.relation_lr,
            seed=self.seed,
        )

    def skew_spec(self) -> SkewSpec:
        """Partitioning parameters."""
        return SkewSpec(
            num_clients=self.clients, n_mean=self.n_mean, k_mean=self.k_mean, stdev=self.stdev, seed=self.seed
        )

    def body_specs(self, input_dim: int) -> list[BodySpec]:
        """One body architecture per client."""
        if self.client_hidden_dims:
            widths = self.client_hidden_dims
            return [BodySpec(input_dim, (widths[i % len(widths)],), self.feature_dim) for i in range(self.clients)]
        return [BodySpec(input_dim, self.hidden_dims, self.feature_dim)] * self.clients

    def is_homogeneous(self) -> bool:
        return len(set(self.client_hidden_dims)) <= 1


KEYS = {f.name: f for f in fields(ExperimentConfig)}


# relation-head schedule of the experiment presets
RELATION_EPOCHS = 10
RELATION_LR = 0.05

PRESETS: dict[str, dict[str, Any]] = {
    # 10 blob classes in 20 dimensions stand in for the image datasets
    "blobs-skew": dict(
        dataset="blobs",
        blobs_classes=10,
        blobs_input_dim=20,
        blobs_std=0.6,
        clients=20,
        n_mean=3.0,
        stdev=2.0,
        k_mean=25.0,
        rounds=30,
        lam=1.0,
        a=0.5,
        hidden_dims=(64,),
        relation_epochs=RELATION_EPOCHS,
        relation_lr=RELATION_LR,
    ),
    "blobs-smoke": dict(
        dataset="blobs",
        blobs_classes=5,
        blobs_input_dim=8,
        blobs_per_class=60,
        clients=5,
        n_mean=2.0,
        stdev=1.0,
        k_mean=10.0,
        rounds=3,
        hidden_dims=(16,),
        feature_dim=8,
        relation_hidden=8,
    ),
}

# first 6000 MNIST training records, about 2000 training samples for n = 3, 50 rounds
_MNIST_BASE = dict(
    dataset="mnist",
    mnist_images="data/mnist/train-images-idx3-ubyte",
    mnist_labels="data/mnist/train-labels-idx1-ubyte",
    mnist_limit=6000,
    clients=20,
    stdev=2.0,
    k_mean=42.0,
    rounds=50,
    hidden_dims=(128,),
    feature_dim=50,
    relation_epochs=RELATION_EPOCHS,
    relation_lr=RELATION_LR,
)
for _n in (3, 4, 5):
    PRESETS[f"mnist-skew-n{_n}"] = dict(_MNIST_BASE, n_mean=float(_n))
PRESETS["mnist-skew-n3-mh"] = dict(_MNIST_BASE, n_mean=3.0, client_hidden_dims=(112, 128, 144))


def suggest(name: str, candidates) -> Optional[str]:
    """Closest candidate to ``name`` by normalized Levenshtein similarity, None if nothing is close."""
    scored = [(Levenshtein.normalized_similarity(name, c), c) for c in sorted(candidates)]
    score, best = max(scored, default=(0.0, None))
    return best if score >= SUGGESTION_THRESHOLD else None


def _unknown(kind: str, name: str, candidates, line: Optional[int] = None) -> ConfigError:
    guess = suggest(name, candidates)
    hint = f', did you mean "{guess}"?' if guess else ""
    return ConfigError(f"unknown {kind}{hint}", key=name, line=line)


def _parse_value(key: str, raw: str, line: Optional[int] = None) -> Any:
    kind = KEYS[key].type
    try:
        if kind is bool:
            if raw not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return raw == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        return tuple(int(item.strip()) for item in raw.split(",") if item.strip())
    except ValueError as e:
        raise ConfigError(f"invalid value {raw!r}: {e}", key=key, line=line) from e


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def apply_preset(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    """Overrides ``cfg`` with the named preset."""
    if name not in PRESETS:
        raise _unknown("preset", name, PRESETS)
    return replace(cfg, **PRESETS[name])


def loads_config(text: str, base: Optional[ExperimentConfig] = None, check_files: bool = True) -> ExperimentConfig:
    """Parses config text on top of ``base`` (the defaults when omitted) and validates the result.

    Parameters
    ----------
    text : str
        Config in the file grammar.
    base : ExperimentConfig, optional
        Values the text overrides, e.g. a preset.
    check_files : bool, optional
        Whether referenced data files must exist.

    Raises
    ------
    ConfigError
        Malformed line, unknown or repeated key, bad value or constraint violation, naming key and line.

    """
    values, lines = {}, {}
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"expected 'key = value', got {content!r}", line=number)
        key, raw = (part.strip() for part in content.split("=", 1))
        if key not in KEYS:
            raise _unknown("key", key, KEYS, number)
        if key in values:
            raise ConfigError(f"repeated, first set on line {lines[key]}", key=key, line=number)
        values[key] = _parse_value(key, raw, number)
        lines[key] = number

    cfg = replace(base or ExperimentConfig(), **values)
    validate(cfg, lines, check_files)
    return cfg


def parse_config(
    path: Union[str, Path], base: Optional[ExperimentConfig] = None, check_files: bool = True
) -> ExperimentConfig:
    """Reads a config file, see :func:`loads_config`."""
    cfg = loads_config(Path(path).read_text(encoding="utf-8"), base, check_files)
    logger.debug("Parsed config %s", path)
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """The resolved config in the file grammar; parsing it back yields an equal config."""
    return "".join(f"{name} = {_format_value(getattr(cfg, name))}\n" for name in KEYS)


def validate(cfg: ExperimentConfig, lines: Optional[dict[str, int]] = None, check_files: bool = True):
    """Raises ConfigError naming the first offending key, and its line when known."""
    lines = lines or {}

    def fail(key: str, message: str):
        raise ConfigError(message, key=key, line=lines.get(key))

    if cfg.dataset not in DATASETS:
        fail("dataset", f"must be one of {DATASETS}, got {cfg.dataset!r}")
    if cfg.method not in METHODS:
        fail("method", f"must be one of {METHODS}, got {cfg.method!r}")
    if cfg.dataset == "mnist":
        for key in ("mnist_images", "mnist_labels"):
            value = getattr(cfg, key)
            if not value:
                fail(key, "required when dataset = mnist")
            if check_files and not Path(value).is_file():
                fail(key, f"file {value} not found")
    for key in ("clients", "blobs_classes", "blobs_input_dim", "blobs_per_class", "feature_dim", "relation_hidden"):
        if getattr(cfg, key) < 1:
            fail(key, f"must be at least 1, got {getattr(cfg, key)}")
    if cfg.mnist_limit < 0:
        fail("mnist_limit", f"must be non-negative, got {cfg.mnist_limit}")
    if cfg.threads < 1:
        fail("threads", f"must be at least 1, got {cfg.threads}")
    if cfg.seed < 0:
        fail("seed", f"must be non-negative, got {cfg.seed}")
    if cfg.blobs_std < 0 or cfg.blobs_scale <= 0:
        fail("blobs_std" if cfg.blobs_std < 0 else "blobs_scale", "blob spread must be non-negative and scale positive")
    if cfg.dataset == "blobs" and cfg.blobs_input_dim < 63 and cfg.blobs_classes > 2**cfg.blobs_input_dim:
        fail(
            "blobs_classes",
            f"{cfg.blobs_classes} classes need distinct hypercube corners, "
            f"blobs_input_dim = {cfg.blobs_input_dim} has only {2**cfg.blobs_input_dim}",
        )
    for key in ("hidden_dims", "client_hidden_dims", "decision_hidden_dims"):
        if any(w < 1 for w in getattr(cfg, key)):
            fail(key, f"widths must be positive, got {getattr(cfg, key)}")
    if cfg.method == "fedavg" and not cfg.is_homogeneous():
        fail("client_hidden_dims", "fedavg needs the same body on every client")

    if not 0.0 <= cfg.a <= 1.0:
        fail("a", f"must lie in [0, 1], got {cfg.a}")
    if cfg.lam < 0:
        fail("lam", f"must be non-negative, got {cfg.lam}")
    for key in ("local_epochs", "batch_size", "rounds"):
        if getattr(cfg, key) < 1:
            fail(key, f"must be at least 1, got {getattr(cfg, key)}")
    if cfg.relation_epochs < 0:
        fail("relation_epochs", f"must be non-negative, got {cfg.relation_epochs}")
    if cfg.lr <= 0:
        fail("lr", f"must be positive, got {cfg.lr}")
    if cfg.relation_lr <= 0:
        fail("relation_lr", f"must be positive, got {cfg.relation_lr}")
    if not 0.0 <= cfg.momentum < 1.0:
        fail("momentum", f"must lie in [0, 1), got {cfg.momentum}")
    try:
        cfg.skew_spec().validate(cfg.num_classes)
    except ContractError as e:
        key = next((k for k in ("n_mean", "k_mean", "stdev") if k in str(e)), "clients")
        fail(key, str(e))


def config_help() -> str:
    """Defaults table of every key, for ``--help`` and the docs."""
    width = max(len(name) for name in KEYS)
    rows = [f"  {name:<{width}}  {_format_value(f.default)!s:<20} {f.metadata['help']}" for name, f in KEYS.items()]
    return "config keys (key, default, meaning):\n" + "\n".join(rows)

# -*- coding: utf-8 -*-
"""Simulator of personalized federated learning with prototype mixing."""
from .baselines import run_fedavg_baseline  # noqa
from .baselines import run_local_baseline  # noqa
from .config import ExperimentConfig  # noqa
from .config import parse_config  # noqa
from .data import SkewSpec  # noqa
from .data import load_mnist_idx  # noqa
from .data import partition_label_skew  # noqa
from .data import synth_blobs  # noqa
from .errors import PFedPMError  # noqa
from .models import BodySpec  # noqa
from .protocol import RoundConfig  # noqa
from .protocol import ServerState  # noqa
from .protocol import build_clients  # noqa
from .protocol import run_pfedpm  # noqa
from .runner import run_experiment  # noqa

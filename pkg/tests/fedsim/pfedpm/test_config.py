import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

from fedsim.pfedpm.config import KEYS
from fedsim.pfedpm.config import PRESETS
from fedsim.pfedpm.config import ExperimentConfig
from fedsim.pfedpm.config import apply_preset
from fedsim.pfedpm.config import config_help
from fedsim.pfedpm.config import dump_config
from fedsim.pfedpm.config import loads_config
from fedsim.pfedpm.config import parse_config
from fedsim.pfedpm.config import suggest
from fedsim.pfedpm.errors import ConfigError


class ParseTestCase(unittest.TestCase):
    def test_empty_text_gives_defaults(self):
        assert loads_config("") == ExperimentConfig()

    def test_values_comments_and_lists(self):
        cfg = loads_config(
            "# a small run\n"
            "\n"
            "rounds = 3  # short\n"
            "a = 0.25\n"
            "hidden_dims = 32, 16\n"
            "checkpoint = true\n"
            "method = local\n"
        )
        assert cfg.rounds == 3 and cfg.a == 0.25
        assert cfg.hidden_dims == (32, 16)
        assert cfg.checkpoint is True
        assert cfg.method == "local"
        assert cfg.lam == ExperimentConfig().lam

    def test_read_from_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.cfg"
            path.write_text("seed = 42\nclients = 4\n", encoding="utf-8")
            cfg = parse_config(path)
        assert cfg.seed == 42 and cfg.clients == 4

    def test_out_of_range_value_names_key_and_line(self):
        with self.assertRaises(ConfigError) as ctx:
            loads_config("rounds = 2\na = 1.5\n")
        assert ctx.exception.key == "a" and ctx.exception.line == 2
        assert str(ctx.exception).startswith('key "a", line 2:')

    def test_unknown_key_suggests_closest(self):
        with self.assertRaises(ConfigError) as ctx:
            loads_config("lamda = 0.5\n")
        assert ctx.exception.key == "lamda" and ctx.exception.line == 1
        assert 'did you mean "lam"?' in str(ctx.exception)
        assert suggest("zzzzzzzz", KEYS) is None

    def test_malformed_lines(self):
        for text, key, line in (
            ("rounds = 2\nrounds = 3\n", "rounds", 2),
            ("checkpoint = yes\n", "checkpoint", 1),
            ("rounds = many\n", "rounds", 1),
            ("seed = 1\nrounds 3\n", None, 2),
        ):
            with self.assertRaises(ConfigError) as ctx:
                loads_config(text)
            assert ctx.exception.key == key and ctx.exception.line == line

    def test_constraints(self):
        for text, key in (
            ("method = fedavg\nclient_hidden_dims = 8, 16\n", "client_hidden_dims"),
            ("n_mean = 11\n", "n_mean"),
            ("stdev = -1\n", "stdev"),
            ("momentum = 1.0\n", "momentum"),
            ("dataset = cifar\n", "dataset"),
            ("hidden_dims = 8, 0\n", "hidden_dims"),
            ("relation_epochs = -1\n", "relation_epochs"),
        ):
            with self.assertRaises(ConfigError) as ctx:
                loads_config(text)
            assert ctx.exception.key == key, text

    def test_negative_seed(self):
        with self.assertRaises(ConfigError) as ctx:
            loads_config("rounds = 2\nseed = -1\n")
        assert ctx.exception.key == "seed" and ctx.exception.line == 2

    def test_more_blob_classes_than_corners(self):
        with self.assertRaises(ConfigError) as ctx:
            loads_config("blobs_classes = 10\nblobs_input_dim = 3\n")
        assert ctx.exception.key == "blobs_classes" and ctx.exception.line == 1
        assert "only 8" in str(ctx.exception)
        assert loads_config("blobs_classes = 8\nblobs_input_dim = 3\n").blobs_classes == 8
        text = "dataset = mnist\nmnist_images = i\nmnist_labels = l\nblobs_input_dim = 3\n"
        assert loads_config(text, check_files=False).dataset == "mnist"

    def test_relation_learning_rate(self):
        with self.assertRaises(ConfigError) as ctx:
            loads_config("relation_lr = 0\n")
        assert ctx.exception.key == "relation_lr"
        cfg = loads_config("lr = 0.02\nrelation_lr = 0.2\n")
        assert cfg.round_config().relation_lr == 0.2 and cfg.round_config().lr == 0.02

    def test_homogeneous_fedavg_accepted(self):
        cfg = loads_config("method = fedavg\nclient_hidden_dims = 16, 16\n")
        assert cfg.is_homogeneous()

    def test_missing_data_files(self):
        text = "dataset = mnist\nmnist_images = /nonexistent/images\nmnist_labels = /nonexistent/labels\n"
        with self.assertRaises(ConfigError) as ctx:
            loads_config(text)
        assert ctx.exception.key == "mnist_images" and ctx.exception.line == 2
        assert loads_config(text, check_files=False).dataset == "mnist"
        with self.assertRaises(ConfigError):
            loads_config("dataset = mnist\n", check_files=False)


class DumpTestCase(unittest.TestCase):
    def test_defaults_round_trip(self):
        cfg = ExperimentConfig()
        assert loads_config(dump_config(cfg)) == cfg

    def test_presets_round_trip(self):
        for name in PRESETS:
            cfg = replace(apply_preset(ExperimentConfig(), name), seed=5, a=0.1)
            assert loads_config(dump_config(cfg), check_files=False) == cfg, name

    def test_one_line_per_key(self):
        lines = dump_config(ExperimentConfig()).splitlines()
        assert [line.split(" = ")[0] for line in lines] == list(KEYS)
        assert all(name in config_help() for name in KEYS)


class PresetTestCase(unittest.TestCase):
    def test_unknown_preset(self):
        with self.assertRaises(ConfigError) as ctx:
            apply_preset(ExperimentConfig(), "mnist-skew-n6")
        assert "did you mean" in str(ctx.exception)

    def test_mnist_presets(self):
        for n in (3, 4, 5):
            cfg = apply_preset(ExperimentConfig(), f"mnist-skew-n{n}")
            assert cfg.dataset == "mnist" and cfg.n_mean == n and cfg.stdev == 2.0
            assert cfg.clients == 20 and cfg.feature_dim == 50 and cfg.num_classes == 10

    def test_experiment_presets_train_the_relation_head(self):
        for name in ("blobs-skew", "mnist-skew-n3", "mnist-skew-n3-mh"):
            rounds = apply_preset(ExperimentConfig(), name).round_config()
            assert rounds.relation_epochs == 10 and rounds.relation_lr == 0.05, name

    def test_client_widths_assigned_cyclically(self):
        cfg = replace(apply_preset(ExperimentConfig(), "mnist-skew-n3-mh"), clients=5)
        specs = cfg.body_specs(784)
        assert [s.hidden_dims for s in specs] == [(112,), (128,), (144,), (112,), (128,)]
        assert {s.feature_dim for s in specs} == {50}
        assert not cfg.is_homogeneous()

    def test_shared_body(self):
        specs = ExperimentConfig(clients=3, hidden_dims=(32,)).body_specs(20)
        assert all(s.hidden_dims == (32,) and s.input_dim == 20 for s in specs)


if __name__ == "__main__":
    unittest.main()

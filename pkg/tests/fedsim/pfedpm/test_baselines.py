import unittest

import numpy as np
from fedsim.pfedpm.baselines import average_parameters
from fedsim.pfedpm.baselines import run_fedavg_baseline
from fedsim.pfedpm.baselines import run_local_baseline
from fedsim.pfedpm.errors import ContractError
from fedsim.pfedpm.models import BodySpec
from fedsim.pfedpm.protocol import RoundConfig
from fedsim.pfedpm.protocol import ServerState
from fedsim.pfedpm.protocol import build_clients

from .fixtures import FEATURE_DIM
from .fixtures import INPUT_DIM
from .fixtures import parameter_values
from .fixtures import small_federation


class AverageParametersTestCase(unittest.TestCase):
    def test_weighted_mean(self):
        averaged = average_parameters([[np.zeros(2)], [np.full(2, 4.0)]], [1, 3])
        assert averaged[0].tolist() == [3.0, 3.0]

    def test_identical_inputs_are_unchanged(self):
        params = [np.array([[0.25, -1.5]]), np.array([2.0])]
        averaged = average_parameters([params, params, params], [4, 4, 4])
        for p, q in zip(params, averaged):
            np.testing.assert_allclose(p, q, rtol=0, atol=1e-15)

    def test_invalid_inputs(self):
        with self.assertRaises(ContractError):
            average_parameters([], [])
        with self.assertRaises(ContractError):
            average_parameters([[np.zeros(2)]], [0])
        with self.assertRaises(ContractError):
            average_parameters([[np.zeros(2)], [np.zeros(3)]], [1, 1])


class LocalBaselineTestCase(unittest.TestCase):
    def test_nothing_uploaded(self):
        cfg = RoundConfig(rounds=2, seed=7)
        _, _, clients = small_federation(cfg)
        server = ServerState()
        series = run_local_baseline(clients, cfg, server=server)
        assert [m.round for m in series] == [1, 2]
        assert all(m.upload_scalars == 0 and m.cum_upload_scalars == 0 for m in series)
        assert all(m.relation_accuracy == {} for m in series)
        assert server.ledger.total_bytes == 0


class FedAvgBaselineTestCase(unittest.TestCase):
    def test_clients_share_parameters_after_each_round(self):
        cfg = RoundConfig(rounds=2, seed=7)
        _, _, clients = small_federation(cfg, num_clients=4, stdev=1.0)
        run_fedavg_baseline(clients, cfg)
        per_client = len(parameter_values(clients[:1]))
        values = parameter_values(clients)
        for cid in range(1, len(clients)):
            for k in range(per_client):
                assert np.array_equal(values[k], values[cid * per_client + k])

    def test_upload_is_the_full_parameter_count(self):
        cfg = RoundConfig(rounds=2, seed=7)
        _, _, clients = small_federation(cfg)
        expected = 0
        for client in clients:
            for shape in client.body.parameter_shapes() + client.decision.parameter_shapes():
                expected += int(np.prod(shape))
        server = ServerState()
        series = run_fedavg_baseline(clients, cfg, server=server)
        assert [m.upload_scalars for m in series] == [expected, expected]
        assert series[-1].cum_upload_scalars == 2 * expected
        assert server.ledger.entries[0].fedavg_scalars == expected
        assert server.ledger.entries[0].ratio > 1.0

    def test_deterministic(self):
        cfg = RoundConfig(rounds=2, seed=7)
        _, _, first = small_federation(cfg)
        run_fedavg_baseline(first, cfg)
        _, _, second = small_federation(cfg)
        run_fedavg_baseline(second, cfg, threads=2)
        for p, q in zip(parameter_values(first), parameter_values(second)):
            assert np.array_equal(p, q)

    def test_heterogeneous_bodies_rejected(self):
        cfg = RoundConfig(rounds=1, seed=7)
        ds, splits, _ = small_federation(cfg)
        specs = [BodySpec(INPUT_DIM, (width,), FEATURE_DIM) for width in (6, 8, 10)]
        clients = build_clients(ds, splits, specs, cfg, relation_hidden=4)
        with self.assertRaises(ContractError):
            run_fedavg_baseline(clients, cfg)

    def test_no_clients(self):
        with self.assertRaises(ContractError):
            run_fedavg_baseline([], RoundConfig(rounds=1))


if __name__ == "__main__":
    unittest.main()

import threading
import unittest

import numpy as np
from fedsim.pfedpm.errors import ContractError
from fedsim.pfedpm.errors import DimensionError
from fedsim.pfedpm.errors import EmptyInputError
from fedsim.pfedpm.errors import LabelError
from fedsim.pfedpm.errors import NumericError
from fedsim.pfedpm.tensor import DiffGraph
from fedsim.pfedpm.tensor import Tensor
from fedsim.pfedpm.tensor import add
from fedsim.pfedpm.tensor import add_bias
from fedsim.pfedpm.tensor import concat_rows
from fedsim.pfedpm.tensor import l2_distance
from fedsim.pfedpm.tensor import matmul
from fedsim.pfedpm.tensor import mean_rows
from fedsim.pfedpm.tensor import mse
from fedsim.pfedpm.tensor import mul
from fedsim.pfedpm.tensor import no_grad
from fedsim.pfedpm.tensor import relu
from fedsim.pfedpm.tensor import scale
from fedsim.pfedpm.tensor import sigmoid
from fedsim.pfedpm.tensor import softmax_cross_entropy
from fedsim.pfedpm.tensor import sum_all
from fedsim.pfedpm.tensor import take_rows

STEP = 1e-5
INSTANCES = 100


def _away_from_zero(rng, shape):
    return rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _projected(out: Tensor, weights: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(weights)))


class GradientCheckTestCase(unittest.TestCase):
    """Reverse-mode gradients against central finite differences."""

    def assert_gradients(self, fn, params):
        with DiffGraph() as graph:
            grads = graph.backward(fn())
        for p in params:
            numeric = np.zeros(p.shape)
            for idx in np.ndindex(p.shape):
                original = p.data[idx]
                p.data[idx] = original + STEP
                plus = fn().item()
                p.data[idx] = original - STEP
                minus = fn().item()
                p.data[idx] = original
                numeric[idx] = (plus - minus) / (2 * STEP)
            np.testing.assert_allclose(grads[p], numeric, rtol=1e-5, atol=1e-8)

    def test_matmul(self):
        rng = np.random.default_rng(0)
        for _ in range(INSTANCES):
            a = Tensor.parameter(rng.normal(size=(3, 4)))
            b = Tensor.parameter(rng.normal(size=(4, 2)))
            w = rng.normal(size=(3, 2))
            self.assert_gradients(lambda: _projected(matmul(a, b), w), [a, b])

    def test_add_bias_relu_sigmoid(self):
        rng = np.random.default_rng(1)
        for _ in range(INSTANCES):
            x = Tensor.parameter(_away_from_zero(rng, (4, 3)))
            b = Tensor.parameter(rng.normal(size=3) * 0.01)
            w = rng.normal(size=(4, 3))
            self.assert_gradients(lambda: _projected(relu(add_bias(x, b)), w), [x, b])
            self.assert_gradients(lambda: _projected(sigmoid(add_bias(x, b)), w), [x, b])

    def test_concat_mean_take(self):
        rng = np.random.default_rng(2)
        for _ in range(INSTANCES):
            a = Tensor.parameter(rng.normal(size=(5, 2)))
            b = Tensor.parameter(rng.normal(size=(5, 3)))
            w = rng.normal(size=5)
            self.assert_gradients(lambda: sum_all(mul(mean_rows(concat_rows(a, b)), Tensor(w))), [a, b])
            rows = [0, 2, 2, 4]
            w2 = rng.normal(size=(4, 2))
            self.assert_gradients(lambda: _projected(take_rows(a, rows), w2), [a])

    def test_losses(self):
        rng = np.random.default_rng(3)
        for _ in range(INSTANCES):
            logits = Tensor.parameter(rng.normal(size=(6, 4)))
            labels = rng.integers(0, 4, size=6)
            self.assert_gradients(lambda: softmax_cross_entropy(logits, labels), [logits])

            pred = Tensor.parameter(rng.normal(size=(6, 1)))
            target = Tensor.parameter(rng.normal(size=(6, 1)))
            self.assert_gradients(lambda: mse(pred, target), [pred, target])

            u = Tensor.parameter(rng.normal(size=5))
            v = Tensor.parameter(rng.normal(size=5))
            self.assert_gradients(lambda: l2_distance(u, v), [u, v])

    def test_elementwise(self):
        rng = np.random.default_rng(4)
        for _ in range(INSTANCES):
            a = Tensor.parameter(rng.normal(size=(3, 3)))
            b = Tensor.parameter(rng.normal(size=(3, 3)))
            self.assert_gradients(lambda: sum_all(scale(add(mul(a, b), a), 0.7)), [a, b])

    def test_two_layer_composite(self):
        rng = np.random.default_rng(5)
        for _ in range(INSTANCES):
            x = Tensor(rng.normal(size=(4, 3)))
            w1 = Tensor.parameter(rng.normal(size=(3, 5)))
            b1 = Tensor.parameter(rng.normal(size=5))
            w2 = Tensor.parameter(rng.normal(size=(5, 2)))
            b2 = Tensor.parameter(rng.normal(size=2))
            labels = rng.integers(0, 2, size=4)

            def loss():
                hidden = sigmoid(add_bias(matmul(x, w1), b1))
                return softmax_cross_entropy(add_bias(matmul(hidden, w2), b2), labels)

            self.assert_gradients(loss, [w1, b1, w2, b2])


class TensorTestCase(unittest.TestCase):
    def test_matmul_matches_triple_loop_bitwise(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        expected = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                total = 0.0
                for p in range(7):
                    total += a[i, p] * b[p, j]
                expected[i, j] = total
        assert np.array_equal(matmul(Tensor(a), Tensor(b)).data, expected)

    def test_matmul_shape_mismatch_names_shapes(self):
        with self.assertRaises(DimensionError) as ctx:
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(ctx.exception) and "(4, 2)" in str(ctx.exception)

    def test_rank_limit_and_finiteness(self):
        with self.assertRaises(DimensionError):
            Tensor(np.zeros((2, 2, 2)))
        with self.assertRaises(NumericError):
            Tensor([1.0, np.nan])

    def test_cross_entropy_shift_invariance(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(8, 5))
        labels = rng.integers(0, 5, size=8)
        base = softmax_cross_entropy(Tensor(logits), labels).item()
        shifted = softmax_cross_entropy(Tensor(logits + 1000.0), labels).item()
        self.assertAlmostEqual(base, shifted, delta=1e-12)

    def test_cross_entropy_errors(self):
        with self.assertRaises(LabelError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
        with self.assertRaises(EmptyInputError):
            softmax_cross_entropy(Tensor(np.zeros((0, 3))), [])
        with self.assertRaises(EmptyInputError):
            mean_rows(Tensor(np.zeros((0, 3))))

    def test_l2_distance_zero_gradient_when_equal(self):
        u = Tensor.parameter([1.0, 2.0])
        v = Tensor.parameter([1.0, 2.0])
        with DiffGraph() as graph:
            grads = graph.backward(l2_distance(u, v))
        assert np.array_equal(grads[u], np.zeros(2))
        assert np.array_equal(grads[v], np.zeros(2))

    def test_backward_needs_recorded_scalar(self):
        w = Tensor.parameter(np.ones((2, 2)))
        with DiffGraph() as graph:
            out = matmul(Tensor(np.ones((1, 2))), w)
            with self.assertRaises(ContractError):
                graph.backward(out)
            with self.assertRaises(ContractError):
                graph.backward(Tensor(1.0))

    def test_no_grad_records_nothing(self):
        w = Tensor.parameter(np.ones((2, 2)))
        with DiffGraph() as graph:
            with no_grad():
                sum_all(matmul(Tensor(np.ones((1, 2))), w))
            assert len(graph) == 0
            sum_all(matmul(Tensor(np.ones((1, 2))), w))
            assert len(graph) == 2

    def test_graph_is_thread_local(self):
        w = Tensor.parameter(np.ones((2, 2)))
        recorded = []
        with DiffGraph() as graph:

            def other_thread():
                sum_all(w)
                recorded.append(len(graph))

            worker = threading.Thread(target=other_thread)
            worker.start()
            worker.join()
        assert recorded == [0]

    def test_gradients_accumulate_over_reuse(self):
        x = Tensor.parameter([3.0])
        with DiffGraph() as graph:
            grads = graph.backward(sum_all(add(x, x)))
        assert np.array_equal(grads[x], np.array([2.0]))
        assert np.array_equal(x.grad, np.array([2.0]))


if __name__ == "__main__":
    unittest.main()

from pathlib import Path
import threading
import pytest

import numpy as np

import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent / 'src'))
sys.path.insert(0, str(Path(__file__).parent))

from unit_helpers import UnitTestHelpers
from noisemap import tensor as T
from noisemap.errors import ArgumentError, ShapeError
from noisemap.tensor import Parameter, Tensor


def _check_gradient(op, shapes, rng, positive=False, tolerance=1e-6, samples=20):
    """Compare backward() with central differences of sum(op(*inputs) * w)."""
    inputs = [
        rng.uniform(0.5, 2.0, size=s) if positive else rng.standard_normal(s)
        for s in shapes
    ]
    tensors = [Tensor(x, requires_grad=True, dtype=np.float64) for x in inputs]
    out = op(*tensors)
    weights = rng.standard_normal(out.shape)
    loss = T.sum_(T.mul(out, weights))
    loss.backward()

    for tensor in tensors:
        def f():
            with T.no_grad():
                return float((op(*tensors).data * weights).sum())

        indices = UnitTestHelpers.sample_indices(tensor.shape, samples, rng)
        numeric = UnitTestHelpers.numeric_gradient(f, tensor.data, indices, h=1e-5)
        for index, value in numeric.items():
            error = UnitTestHelpers.relative_error(tensor.grad[index], value)
            assert error < tolerance, f"{index}: analytic {tensor.grad[index]} vs numeric {value}"


class TestPrimitiveGradients:
    """Central finite-difference checks of every primitive on the float64 path."""

    def test_add_sub_mul(self, rng):
        _check_gradient(T.add, [(3, 4), (3, 4)], rng)
        _check_gradient(T.sub, [(3, 4), (3, 4)], rng)
        _check_gradient(T.mul, [(3, 4), (3, 4)], rng)

    def test_scale_and_constant_operands(self, rng):
        _check_gradient(lambda a: T.scale(a, -2.5), [(5,)], rng)
        _check_gradient(lambda a: a * 3.0 + 1.0, [(2, 3)], rng)

    def test_matmul_transpose_reshape(self, rng):
        _check_gradient(T.matmul, [(3, 4), (4, 2)], rng)
        _check_gradient(lambda a: T.transpose(a, (2, 0, 1)), [(2, 3, 4)], rng)
        _check_gradient(lambda a: T.reshape(a, (6, 4)), [(2, 3, 4)], rng)

    def test_reductions_and_slicing(self, rng):
        _check_gradient(lambda a: T.reshape(T.mean(a), (1,)), [(4, 5)], rng)
        _check_gradient(lambda a: T.slice_(a, (slice(None), 1)), [(4, 3)], rng)
        _check_gradient(lambda a, b: T.concat([a, b], axis=1), [(2, 3, 2), (2, 1, 2)], rng)

    def test_elementwise_nonlinearities(self, rng):
        _check_gradient(T.relu, [(4, 4)], rng)
        _check_gradient(T.log, [(4, 4)], rng, positive=True)
        _check_gradient(T.abs_, [(4, 4)], rng)
        _check_gradient(lambda a: T.clip(a, -0.5, 0.5), [(4, 4)], rng)

    def test_det_and_softmax(self, rng):
        _check_gradient(lambda m: T.reshape(T.det2x2(m), (1,)), [(2, 2)], rng)
        _check_gradient(lambda a: T.softmax(a, axis=1), [(2, 3, 4, 4)], rng)

    def test_conv2d(self, rng):
        _check_gradient(T.conv2d, [(2, 3, 5, 5), (4, 3, 3, 3), (4,)], rng, samples=30)
        _check_gradient(T.conv2d, [(1, 2, 4, 4), (3, 2, 1, 1)], rng)

    def test_pool_and_upsample(self, rng):
        _check_gradient(T.maxpool2d, [(2, 2, 4, 6)], rng)
        _check_gradient(T.upsample_nearest, [(1, 2, 3, 3)], rng)

    def test_batchnorm_train_and_eval(self, rng):
        for training in (True, False):
            running_mean = np.zeros(3)
            running_var = np.ones(3)

            def op(x, gamma, beta):
                return T.batchnorm2d(x, gamma, beta, running_mean.copy(), running_var.copy(), training=training)

            _check_gradient(op, [(4, 3, 3, 3), (3,), (3,)], rng, samples=30)


class TestTape:
    """Graph construction, accumulation and no_grad."""

    def test_shared_input_accumulates(self):
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True, dtype=np.float64)
        T.sum_(T.mul(x, x)).backward()
        assert np.allclose(x.grad, [4.0, 6.0])

    def test_no_grad_builds_no_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.sum_(x * 2.0)
        assert not y.requires_grad
        with pytest.raises(ArgumentError, match="not on the computation tape"):
            y.backward()

    def test_no_grad_is_per_thread(self):
        seen = []

        def worker():
            seen.append(T._grad_enabled())

        with T.no_grad():
            thread = threading.Thread(target=worker)
            thread.start()
            thread.join()
        assert seen == [True]

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ArgumentError, match="scalar"):
            (x * 2.0).backward()

    def test_no_broadcasting(self):
        with pytest.raises(ShapeError, match="no broadcasting"):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_float32_stays_float32(self):
        x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32), requires_grad=True)
        w = Tensor(np.ones((2, 1, 3, 3), dtype=np.float32), requires_grad=True)
        out = T.conv2d(x, w)
        T.sum_(out).backward()
        assert out.dtype == np.float32
        assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32

    def test_conv_rejects_even_kernel(self):
        with pytest.raises(ShapeError, match="odd"):
            T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))


class TestOptimiser:
    """Momentum SGD on parameters."""

    def test_momentum_update(self):
        param = Parameter("w", np.array([1.0, -1.0]))
        for _ in range(2):
            T.zero_grads([param])
            param.tensor.grad = np.array([0.5, 0.5], dtype=param.data.dtype)
            T.sgd_step([param], lr=0.1, momentum=0.9)
        # v1 = 0.5, v2 = 0.9 * 0.5 + 0.5 = 0.95; total step 0.1 * (0.5 + 0.95)
        assert np.allclose(param.data, [1.0 - 0.145, -1.0 - 0.145])

    def test_missing_gradient_counts_as_zero(self):
        param = Parameter("w", np.array([1.0]))
        T.sgd_step([param], lr=0.1, momentum=0.9)
        assert param.data[0] == pytest.approx(1.0)


class TestCheckpointFormat:
    """NNW1 parameter records."""

    def test_round_trip_keeps_order_and_values(self, tmp_path, rng):
        named = {
            'b.weight': rng.standard_normal((2, 3, 3, 3)).astype(np.float32),
            'a.bias': rng.standard_normal(2).astype(np.float32),
            'scalar': np.float32(1.5),
        }
        path = tmp_path / 'weights.nnw'
        T.save_parameters(named, path)
        loaded = T.load_parameters(path)

        assert list(loaded) == list(named)
        for name in named:
            assert np.array_equal(loaded[name], np.asarray(named[name]))

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / 'weights.nnw'
        path.write_bytes(b"XXXX")
        with pytest.raises(ArgumentError, match="NNW1"):
            T.load_parameters(path)

    def test_truncated_record(self, tmp_path):
        path = tmp_path / 'weights.nnw'
        T.save_parameters({'w': np.ones(8, dtype=np.float32)}, path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ArgumentError, match="truncated"):
            T.load_parameters(path)

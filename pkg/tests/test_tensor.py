import threading

import numpy as np
import pytest

from iatseg import ops
from iatseg.errors import NonFiniteError, ShapeError, TapeError
from iatseg.gradcheck import check_gradients, finite_difference_check
from iatseg.tensor import (ComputationTape, Tensor, backward, current_tape, is_grad_enabled, no_grad,
                           reset_default_tape)


def test_backward_accumulates_shared_inputs():
    """x가 두 번 쓰이면 기울기가 합산되어야 함"""
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with ComputationTape():
        y = ops.sum(x * x + x)
        backward(y)
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_scalar_broadcast_gradient():
    x = Tensor([[1.0, -2.0], [0.5, 4.0]], requires_grad=True)
    s = Tensor(3.0, requires_grad=True)
    with ComputationTape():
        backward(ops.sum(x * s))
    assert np.allclose(x.grad, 3.0)
    assert float(s.grad) == pytest.approx(x.data.sum())


def test_tape_is_consumed_by_backward():
    x = Tensor(2.0, requires_grad=True)
    with ComputationTape() as tape:
        y = x * x
        z = y + 1.0
    backward(z)
    assert tape.consumed
    assert len(tape) == 0
    with pytest.raises(TapeError):
        backward(z)
    with pytest.raises(TapeError):
        tape.record(z, (x,), lambda g: (g,), "late")


def test_backward_needs_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with ComputationTape():
        y = x * 2.0
        with pytest.raises(TapeError):
            backward(y)


def test_backward_needs_grad_path():
    with pytest.raises(TapeError):
        backward(Tensor(1.0))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(4), requires_grad=True)
    with ComputationTape() as tape:
        with no_grad():
            assert not is_grad_enabled()
            y = ops.sum(x * 3.0)
        assert is_grad_enabled()
    assert len(tape) == 0
    assert not y.requires_grad


def test_default_tape_is_replaced_after_consumption():
    x = Tensor(1.5, requires_grad=True)
    first = current_tape()
    backward(x * x)
    assert first.consumed
    assert current_tape() is not first
    assert float(x.grad) == pytest.approx(3.0)


def test_reset_default_tape_drops_unscoped_records():
    reset_default_tape()
    x = Tensor(np.ones(3), requires_grad=True)
    for _ in range(5):
        ops.sum(x * 2.0)
    recorded = len(current_tape())
    assert recorded >= 5
    assert reset_default_tape() == recorded
    assert len(current_tape()) == 0
    assert reset_default_tape() == 0
    with no_grad():
        ops.sum(x * 2.0)
    assert len(current_tape()) == 0


def test_tape_is_confined_to_its_thread():
    x = Tensor(2.0, requires_grad=True)
    with ComputationTape():
        y = x * x
    errors = []

    def worker():
        try:
            backward(y)
        except TapeError as e:
            errors.append(e)

    thread = threading.Thread(target=worker)
    thread.start()
    thread.join()
    assert len(errors) == 1


def test_non_finite_values_are_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError) as info:
        ops.log(Tensor([0.0, 1.0]))
    assert info.value.op_name == "log"
    with pytest.raises(NonFiniteError):
        ops.div(Tensor(1.0), Tensor(0.0))


def test_item_and_detach():
    x = Tensor([[2.5]], requires_grad=True)
    assert x.item() == 2.5
    d = x.detach()
    assert not d.requires_grad and d.is_leaf
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_float32_precision_is_kept():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    with ComputationTape():
        y = ops.sum(ops.sigmoid(x))
        backward(y)
    assert y.dtype == np.float32
    assert x.grad.dtype == np.float32


def test_shape_mismatch_is_an_error():
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ops.softmax(Tensor(np.ones((2, 0))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((3, 2, 2))), Tensor(np.ones((1, 3, 5, 5))))


def test_softmax_rows_sum_to_one():
    x = Tensor(np.array([[1000.0, 0.0, -1000.0], [1.0, 2.0, 3.0]]))
    y = ops.softmax(x, axis=-1).data
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-15)
    assert y[0, 0] == pytest.approx(1.0)


def test_layer_norm_output_is_standardized(rng):
    x = Tensor(rng.normal(3.0, 5.0, size=(4, 16)))
    y = ops.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(y.std(axis=-1), 1.0, atol=1e-4)


def test_conv2d_matches_direct_sum(rng):
    x = rng.normal(size=(2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    assert out.shape == (3, 3, 3)
    for o in range(3):
        for i in range(3):
            for j in range(3):
                window = padded[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                assert out[o, i, j] == pytest.approx(np.sum(window * k[o]))


def test_bilinear_sample_at_centers_and_outside():
    fmap = Tensor(np.arange(12, dtype=np.float64).reshape(1, 3, 4))
    out = ops.bilinear_sample(fmap, [(0.0, 0.0), (3.0, 2.0), (1.5, 0.5), (-1.0, 0.0), (10.0, 10.0)]).data
    assert out.shape == (1, 5)
    assert out[0, 0] == 0.0
    assert out[0, 1] == 11.0
    assert out[0, 2] == pytest.approx((1 + 2 + 5 + 6) / 4)
    assert out[0, 3] == 0.0
    assert out[0, 4] == 0.0


def test_bilinear_sample_half_outside_reads_zero_neighbours():
    fmap = Tensor(np.full((1, 2, 2), 4.0))
    out = ops.bilinear_sample(fmap, [(-0.5, 0.0)]).data
    assert out[0, 0] == pytest.approx(2.0)


def test_finite_difference_of_composite_expression(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(2, 4)))

    def f(t):
        h = ops.relu(ops.linear(t, w))
        return ops.sum(ops.log_sigmoid(h) + ops.power(ops.exp(ops.scale(t, 0.1)), 1.5).sum())

    assert finite_difference_check(f, x) < 1e-6


def test_gradient_of_getitem_with_repeats():
    x = Tensor(np.arange(4.0))
    err = check_gradients(lambda: ops.sum(ops.getitem(x, np.array([1, 1, 3]))), [x])
    assert err < 1e-8
    x.requires_grad = True
    x.grad = None
    with ComputationTape():
        backward(ops.sum(ops.getitem(x, np.array([1, 1, 3]))))
    assert np.array_equal(x.grad, [0.0, 2.0, 0.0, 1.0])

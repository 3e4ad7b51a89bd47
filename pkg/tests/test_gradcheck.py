import numpy as np
import pytest

from iatseg import ops
from iatseg.checks import OP_TOLERANCE, op_gradient_errors
from iatseg.errors import GradCheckError
from iatseg.gradcheck import check_gradients, check_parameters, gradient_errors, sample_coordinates
from iatseg.tensor import Tensor


@pytest.mark.parametrize("seed", range(10))
def test_every_op_matches_central_differences(seed):
    errors = op_gradient_errors(seed=seed)
    assert len(errors) == 27
    bad = {name: err for name, err in errors.items() if not err < OP_TOLERANCE}
    assert not bad


def test_relative_error_uses_unit_floor():
    """|a - n| / max(1, |a|): 작은 기울기에서는 절대 오차, 큰 기울기에서는 상대 오차"""
    x = Tensor(np.array([0.5]))

    def small():
        return ops.sum(ops.add(ops.detach(ops.scale(x, 0.5)), ops.scale(x, 0.0)))

    def large():
        return ops.sum(ops.add(ops.detach(ops.scale(x, 10.0)), ops.scale(x, 10.0)))

    assert check_gradients(small, [x]) == pytest.approx(0.5, abs=1e-6)
    assert check_gradients(large, [x]) == pytest.approx(1.0, abs=1e-6)


def test_broken_backward_is_detected():
    x = Tensor(np.array([1.0, 2.0]))

    def f():
        y = ops.mul(x, 3.0)
        # 기울기를 일부러 무시하는 연산
        return ops.sum(ops.add(ops.detach(y), ops.scale(x, 1.0)))

    assert check_gradients(f, [x]) == pytest.approx(3.0, abs=1e-6)


def test_nondeterministic_function_is_rejected():
    x = Tensor(np.array([1.0]))
    counter = [0]

    def f():
        counter[0] += 1
        return ops.sum(ops.add(x, float(counter[0])))

    with pytest.raises(GradCheckError):
        gradient_errors(f, [x])


def test_step_must_be_positive():
    x = Tensor(np.array([1.0]))
    with pytest.raises(ValueError):
        gradient_errors(lambda: ops.sum(x), [x], h=0.0)


def test_sampled_coordinates_stay_in_range(rng):
    params = {"a": Tensor(np.zeros((2, 3))), "b": Tensor(np.zeros(2))}
    picks = sample_coordinates(params, 4, rng)
    assert len(picks[0]) == 4 and len(set(picks[0])) == 4
    assert sorted(picks[1]) == [0, 1]
    assert all(0 <= i < 6 for i in picks[0])


def test_check_parameters_names_worst_parameter():
    a = Tensor(np.array([0.3, -0.7]))
    b = Tensor(np.array([1.2]))

    def loss():
        return ops.add(ops.sum(ops.mul(a, a)), ops.sum(ops.detach(ops.scale(b, 4.0))))

    worst, name = check_parameters(loss, {"a": a, "b": b}, per_param=2)
    assert name == "b"
    assert worst == pytest.approx(4.0, abs=1e-6)

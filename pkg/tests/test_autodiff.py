from __future__ import annotations

import numpy as np
import pytest

from nide import NonFiniteError, ShapeError, Tape, TapeError, Tensor, backward, grad_check, no_record
from nide._autodiff import (
    add,
    concat,
    cosh,
    dot,
    matmul,
    reduce_sum,
    reshape,
    scale,
    sinh,
    take,
    tanh,
    weighted_sum,
)
from nide._types import FloatArray  # noqa: TC001

point = np.array([0.1, 0.25, 0.4, 0.55, 0.7, 0.85])
weights = Tensor(np.array([[0.3, 0.2, 0.7], [0.5, 0.9, 0.1]]))


def test_tanh_gradient() -> None:
    with Tape() as tape:
        x = Tensor([1.0, 2.0, 3.0])
        y = reduce_sum(tanh(x))
    grads = backward(tape, y)
    assert np.allclose(grads.wrt(x), 1.0 - np.tanh([1.0, 2.0, 3.0]) ** 2, rtol=0, atol=1e-15)


def test_fan_out_contributions_are_summed() -> None:
    with Tape() as tape:
        x = Tensor([1.0, -2.0])
        y = reduce_sum(add(x, scale(x, 3.0)))
    assert np.array_equal(backward(tape, y).wrt(x), [4.0, 4.0])


def test_unused_leaf_has_zero_gradient() -> None:
    with Tape() as tape:
        x = Tensor([1.0, 2.0])
        unused = Tensor([[5.0]])
        y = reduce_sum(x)
    grads = backward(tape, y)
    assert np.array_equal(grads.wrt(unused), np.zeros((1, 1)))


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: reduce_sum(tanh(matmul(reshape(x, (3, 2)), weights))),
        lambda x: reduce_sum(cosh(x)),
        lambda x: reduce_sum(sinh(x)),
        lambda x: reduce_sum(tanh(weighted_sum([0.5, 2.0], [x, scale(x, 3.0)]))),
        lambda x: reduce_sum(tanh(concat([x, scale(x, 2.0)]))),
        lambda x: reduce_sum(tanh(take(x, np.array([0, 0, 3, 5])))),
        lambda x: reduce_sum(tanh(take(reshape(x, (3, 2)), slice(1, 3)))),
        lambda x: dot(x, x),
    ],
    ids=["matmul", "cosh", "sinh", "weighted_sum", "concat", "gather", "slice", "dot"],
)
def test_primitives_match_central_differences(fn) -> None:  # type: ignore[no-untyped-def]
    assert grad_check(fn, point) <= 1e-6


def test_stacked_matmul() -> None:
    a = Tensor(np.arange(12.0).reshape(2, 2, 3))
    b = Tensor(np.ones((2, 3, 1)))
    assert matmul(a, b).shape == (2, 2, 1)
    assert np.array_equal(matmul(a, b).data[1, :, 0], [12.0 + 13.0 + 14.0, 15.0 + 16.0 + 17.0])


def test_shape_errors() -> None:
    with pytest.raises(ShapeError) as info:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert info.value.primitive == "matmul"
    assert info.value.shapes == ((2, 3), (2, 3))

    with pytest.raises(ShapeError):
        add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    with pytest.raises(ShapeError):
        reshape(Tensor([1.0, 2.0, 3.0]), (2, 2))

    with pytest.raises(ShapeError):
        take(Tensor([1.0, 2.0]), np.array([2]))

    with pytest.raises(ShapeError):
        dot(Tensor([1.0, 2.0]), Tensor([1.0]))


def test_backward_needs_a_scalar_from_the_same_tape() -> None:
    with Tape() as tape:
        x = Tensor([1.0, 2.0])
        y = tanh(x)
    with pytest.raises(TapeError):
        backward(tape, y)

    with Tape() as other:
        z = reduce_sum(tanh(Tensor([1.0])))
    with pytest.raises(TapeError):
        backward(tape, z)
    assert len(other) == 2


def test_no_record_inside_a_tape() -> None:
    with Tape() as tape:
        x = Tensor([0.5])
        with no_record():
            y = tanh(x)
        z = tanh(x)
    assert y.is_leaf
    assert not z.is_leaf
    assert len(tape) == 1


def test_strict_tape_rejects_non_finite_values() -> None:
    with Tape(strict=True), pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        cosh(Tensor([1000.0]))

    with np.errstate(over="ignore"):
        assert np.isinf(cosh(Tensor([1000.0])).item())


def test_outside_a_tape_values_are_plain() -> None:
    y = reduce_sum(tanh(Tensor([0.0, 0.0])))
    assert y.is_leaf
    assert y.item() == 0.0
    assert y.shape == ()


shift = Tensor(np.full(6, 3.0))


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: reduce_sum(tanh(matmul(reshape(scale(x, 0.25), (3, 2)), weights))),
        lambda x: reduce_sum(tanh(x)),
        lambda x: reduce_sum(cosh(add(x, shift))),
        lambda x: reduce_sum(sinh(x)),
        lambda x: reduce_sum(tanh(weighted_sum([0.5, 2.0], [x, scale(x, 0.1)]))),
        lambda x: reduce_sum(tanh(concat([x, scale(x, 0.5)]))),
        lambda x: reduce_sum(tanh(take(x, np.array([0, 0, 3, 5])))),
        lambda x: reduce_sum(tanh(take(reshape(x, (3, 2)), slice(1, 3)))),
        lambda x: dot(x, cosh(x)),
    ],
    ids=["matmul", "tanh", "cosh", "sinh", "weighted_sum", "concat", "gather", "slice", "dot"],
)
def test_primitives_match_central_differences_at_random_points(fn) -> None:  # type: ignore[no-untyped-def]
    rng = np.random.default_rng(20240601)
    worst = max(grad_check(fn, rng.uniform(-2.0, 2.0, size=6)) for _ in range(100))
    assert worst <= 1e-6


def _tanh_network_gradient(point: FloatArray, seed: float = 1.0) -> FloatArray:
    with Tape() as tape:
        leaf = Tensor(point)
        hidden = tanh(matmul(reshape(leaf, (3, 2)), weights))
        out = reduce_sum(sinh(weighted_sum([0.7, -0.3], [hidden, scale(hidden, 2.0)])))
    return backward(tape, out, seed=seed).wrt(leaf)


def test_backward_is_linear_in_the_seed() -> None:
    unit = _tanh_network_gradient(point)
    for seed in (3.0, -0.5):
        assert np.allclose(_tanh_network_gradient(point, seed=seed), seed * unit, rtol=1e-12, atol=0)


def test_replaying_a_computation_gives_identical_gradients() -> None:
    assert np.array_equal(_tanh_network_gradient(point), _tanh_network_gradient(point))

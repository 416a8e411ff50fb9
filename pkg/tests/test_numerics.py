from __future__ import annotations

import math

import numpy as np
import pytest

from nide import DimensionError, GridFunction, QuadratureRule, Tensor, integrate, nodes_and_weights
from nide._numerics import IntegralPlan, cumulative_trapezoid


@pytest.mark.parametrize("count", [1, 3, 5, 8])
def test_gauss_legendre_is_exact_to_degree_2n_minus_1(count: int) -> None:
    nodes, weights = nodes_and_weights(QuadratureRule(node_count=count), 0.0, 1.0)
    degree = 2 * count - 1
    approx = sum(float(np.sum(weights * nodes**k)) for k in range(degree + 1))
    exact = sum(1.0 / (k + 1) for k in range(degree + 1))
    assert approx == pytest.approx(exact, rel=1e-12, abs=1e-12)


def test_weights_sum_to_interval_length() -> None:
    for rule in (QuadratureRule(node_count=7), QuadratureRule(kind="monte_carlo", sample_count=50, seed=3)):
        _, weights = nodes_and_weights(rule, -0.5, 2.0)
        assert float(np.sum(weights)) == pytest.approx(2.5, rel=1e-12)


def test_monte_carlo_is_deterministic_per_call() -> None:
    rule = QuadratureRule(kind="monte_carlo", sample_count=20, seed=11)
    first, _ = nodes_and_weights(rule, 0.0, 1.0, call=0)
    again, _ = nodes_and_weights(rule, 0.0, 1.0, call=0)
    other, _ = nodes_and_weights(rule, 0.0, 1.0, call=1)
    assert np.array_equal(first, again)
    assert not np.array_equal(first, other)
    assert np.all((first >= 0.0) & (first <= 1.0))


def test_degenerate_and_reversed_limits() -> None:
    nodes, weights = nodes_and_weights(QuadratureRule(), 1.0, 1.0)
    assert nodes.size == 0
    assert weights.size == 0
    with pytest.raises(ValueError):
        nodes_and_weights(QuadratureRule(), 1.0, 0.0)

    assert np.array_equal(integrate(lambda s: Tensor([s, 1.0]), QuadratureRule(), 2.0, 2.0).data, [0.0, 0.0])


def test_integrate() -> None:
    value = integrate(lambda s: Tensor([s * s]), QuadratureRule(node_count=2), 0.0, 3.0)
    assert value.item() == pytest.approx(9.0, rel=1e-12)


def test_linear_interpolation_reproduces_linear_paths() -> None:
    grid = np.linspace(0.0, 2.0, 11)
    path = GridFunction(0.0, 2.0, np.column_stack([2.0 * grid + 1.0, -grid]))
    queries = np.random.default_rng(0).uniform(0.0, 2.0, 25)
    expected = np.column_stack([2.0 * queries + 1.0, -queries])
    assert np.allclose(path.sample(queries).data, expected, rtol=0, atol=1e-12)
    assert np.allclose(path.sample_values(queries), expected, rtol=0, atol=1e-12)


def test_node_values_are_bit_exact() -> None:
    values = np.random.default_rng(1).normal(size=(9, 3))
    path = GridFunction(0.0, 1.0, values)
    for index in range(path.grid_size):
        assert np.array_equal(path.eval(float(path.times[index])).data, values[index])


def test_evaluation_clamps_to_the_grid() -> None:
    path = GridFunction(0.0, 1.0, [[0.0], [1.0]])
    assert path.eval(-3.0).item() == 0.0
    assert path.eval(7.0).item() == 1.0
    assert path.step == 1.0


def test_grid_function_checks_its_shape() -> None:
    with pytest.raises(DimensionError):
        GridFunction(0.0, 1.0, [[1.0]])
    with pytest.raises(DimensionError):
        GridFunction(1.0, 1.0, [[1.0], [2.0]])


def test_integral_plan_matches_closed_form() -> None:
    grid = np.linspace(0.0, 1.0, 21)
    times = np.array([0.25, 0.5, 1.0])
    plan = IntegralPlan(times, np.zeros(3), times, QuadratureRule(node_count=4), grid)
    kernel = plan.kernel_values(lambda t, s: Tensor(np.ones((t.shape[0], 1, 1))))
    result = plan.evaluate(kernel, lambda states: states, Tensor(grid[:, None]))
    assert result.shape == (3, 1)
    assert np.allclose(result.data[:, 0], times**2 / 2.0, rtol=0, atol=1e-12)


def test_cumulative_trapezoid() -> None:
    times = np.array([1.0, 1.5, 3.0])
    assert np.allclose(cumulative_trapezoid(np.ones((3, 2)), times), np.column_stack([times - 1.0] * 2))


def test_integrate_sine_over_half_a_period() -> None:
    value = integrate(lambda s: Tensor([math.sin(s)]), QuadratureRule(), 0.0, math.pi)
    assert value.item() == pytest.approx(2.0, rel=1e-12)


def test_integrate_is_linear_in_the_integrand() -> None:
    rule = QuadratureRule(node_count=6)

    def first(s: float) -> np.ndarray:
        return np.array([s**3, math.sin(s)])

    def second(s: float) -> np.ndarray:
        return np.array([math.exp(s), 1.0])

    combined = integrate(lambda s: Tensor(2.5 * first(s) - 0.75 * second(s)), rule, -1.0, 2.0)
    parts = 2.5 * integrate(lambda s: Tensor(first(s)), rule, -1.0, 2.0).data
    parts -= 0.75 * integrate(lambda s: Tensor(second(s)), rule, -1.0, 2.0).data
    assert np.allclose(combined.data, parts, rtol=1e-12, atol=1e-12)


def test_linear_interpolation_error_is_second_order() -> None:
    queries = np.linspace(0.0, 2.0, 401)
    errors = []
    for grid_size in (11, 21, 41):
        grid = np.linspace(0.0, 2.0, grid_size)
        path = GridFunction(0.0, 2.0, np.cos(grid)[:, None])
        errors.append(float(np.max(np.abs(path.sample_values(queries)[:, 0] - np.cos(queries)))))
    assert errors[0] / errors[1] >= 3.5
    assert errors[1] / errors[2] >= 3.5


def test_integral_plan_reads_cubics_exactly_from_node_rates() -> None:
    grid = np.linspace(0.0, 1.0, 11)
    times = np.array([0.3, 0.55, 1.0])
    plan = IntegralPlan(times, np.zeros(3), times, QuadratureRule(node_count=4), grid)
    kernel = plan.kernel_values(lambda t, s: Tensor(np.ones((t.shape[0], 1, 1))))
    values = Tensor((grid**3 - grid)[:, None])
    rates = Tensor((3.0 * grid**2 - 1.0)[:, None])
    result = plan.evaluate(kernel, lambda states: states, values, rates)
    assert np.allclose(result.data[:, 0], times**4 / 4.0 - times**2 / 2.0, rtol=0, atol=1e-12)

    linear = plan.evaluate(kernel, lambda states: states, values)
    assert not np.allclose(linear.data[:, 0], times**4 / 4.0 - times**2 / 2.0, rtol=0, atol=1e-6)

    with pytest.raises(DimensionError):
        plan.evaluate(kernel, lambda states: states, values, Tensor(np.ones((10, 1))))
    with pytest.raises(DimensionError):
        GridFunction(0.0, 1.0, values, np.ones((11, 2)))

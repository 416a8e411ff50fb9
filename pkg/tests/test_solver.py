from __future__ import annotations

import math

import numpy as np
import pytest

from nide import (
    DimensionError,
    Fredholm,
    GridFunction,
    IdeSystem,
    ModelConfig,
    ParamVector,
    QuadratureRule,
    SolverConfig,
    SolverError,
    Tensor,
    Volterra,
    integral_term,
    local_term,
    residual,
    solve_ivp,
)
from nide._solver import AnalyticDynamics, AnalyticIntegrand, AnalyticKernel, iterate_once, kernel_diagonal_mask


def unit_kernel(t: np.ndarray, s: np.ndarray) -> np.ndarray:
    return np.ones((t.shape[0], 1, 1))


def memory_only(interval: Volterra | Fredholm) -> IdeSystem:
    return IdeSystem(
        state_dim=1,
        kernel=AnalyticKernel(unit_kernel, 1, 1),
        integrand=AnalyticIntegrand(lambda states: states, 1, 1),
        interval=interval,
    )


def test_volterra_benchmark_gives_cosh() -> None:
    solution = solve_ivp(memory_only(Volterra()), [1.0], 0.0, 1.0, SolverConfig(grid_size=201, max_iter=10))
    assert solution.converged
    assert solution.iterations_used <= 10
    assert abs(solution.y.eval(1.0).item() - math.cosh(1.0)) <= 1e-3
    assert list(solution.changes) == sorted(solution.changes, reverse=True)
    assert residual(memory_only(Volterra()), solution.y) <= 1e-3


def test_fredholm_benchmark_gives_affine_path() -> None:
    config = SolverConfig(grid_size=101, max_iter=60, tolerance=1e-12)
    solution = solve_ivp(memory_only(Fredholm()), [1.0], 0.0, 1.0, config)
    assert solution.converged
    grid = solution.y.times
    assert np.allclose(solution.y.numpy()[:, 0], 1.0 + 2.0 * grid, rtol=0, atol=1e-6)


def test_fredholm_residual_of_exact_path() -> None:
    grid = np.linspace(0.0, 1.0, 51)
    path = GridFunction(0.0, 1.0, (1.0 + 2.0 * grid)[:, None])
    assert residual(memory_only(Fredholm()), path) <= 1e-10
    assert np.allclose(integral_term(memory_only(Fredholm()), path, [0.0, 0.5]), 2.0)


def test_first_pass_from_the_constant_iterate() -> None:
    system = memory_only(Volterra())
    constant = GridFunction(0.0, 1.0, np.ones((11, 1)))
    following = iterate_once(system, constant, [1.0], SolverConfig(grid_size=11))
    assert np.allclose(following.numpy()[:, 0], 1.0 + following.times**2 / 2.0, rtol=0, atol=1e-12)


def test_monte_carlo_quadrature() -> None:
    config = SolverConfig(quadrature=QuadratureRule(kind="monte_carlo", sample_count=1000, seed=5))
    first = solve_ivp(memory_only(Volterra()), [1.0], 0.0, 1.0, config)
    again = solve_ivp(memory_only(Volterra()), [1.0], 0.0, 1.0, config)
    assert abs(first.y.eval(1.0).item() - math.cosh(1.0)) <= 1e-2
    assert np.array_equal(first.y.numpy(), again.y.numpy())


def test_local_term_only() -> None:
    system = IdeSystem(state_dim=2, dynamics=AnalyticDynamics(lambda t, y: -y, 2))
    for stepper, tolerance in (("rk4", 1e-9), ("euler", 1e-2)):
        solution = solve_ivp(system, [1.0, 2.0], 0.0, 1.0, SolverConfig(grid_size=101, stepper=stepper))
        assert solution.converged
        assert solution.iterations_used == 1
        assert solution.final_residual == 0.0
        assert np.allclose(solution.y.eval(1.0).data, [math.exp(-1.0), 2.0 * math.exp(-1.0)], atol=tolerance)
    assert np.array_equal(integral_term(system, solution.y, [0.5]), np.zeros((1, 2)))
    assert np.allclose(local_term(system, solution.y, [0.0]), [[-1.0, -2.0]])


def test_non_finite_states() -> None:
    system = IdeSystem(state_dim=1, dynamics=AnalyticDynamics(lambda t, y: np.where(t[:, None] > 0.5, np.nan, -y), 1))
    with pytest.raises(SolverError) as info:
        solve_ivp(system, [1.0], 0.0, 1.0, SolverConfig(grid_size=11))
    assert info.value.iteration == 1
    assert 0.5 <= info.value.time <= 1.0

    with pytest.raises(SolverError) as info:
        solve_ivp(system, [math.inf], 0.0, 1.0)
    assert info.value.iteration == 0


def test_problem_checks() -> None:
    system = memory_only(Volterra())
    with pytest.raises(DimensionError):
        solve_ivp(system, [1.0, 2.0], 0.0, 1.0)
    with pytest.raises(DimensionError):
        solve_ivp(system, [1.0], 1.0, 1.0)
    with pytest.raises(DimensionError):
        IdeSystem(state_dim=1, kernel=AnalyticKernel(unit_kernel, 1, 1))
    with pytest.raises(DimensionError):
        IdeSystem(state_dim=2, dynamics=AnalyticDynamics(lambda t, y: y, 1))


def test_systems_from_templates() -> None:
    config = ModelConfig(state_dim=2, latent_dim=1, dynamics_hidden=(4,), kernel_hidden=(3,), integrand_hidden=(3,))
    system = IdeSystem.from_config(config, seed=4)
    again = IdeSystem.from_config(config, seed=4)
    assert system.parameter_count == config.parameter_count
    assert np.array_equal(system.params.values, again.params.values)
    assert not np.array_equal(system.params.values, IdeSystem.from_config(config, seed=5).params.values)
    assert [net.name for net in system.nets] == ["dynamics", "kernel", "integrand"]
    start = system.nets[0].parameter_count
    assert system.params.span("kernel") == (start, start + system.nets[1].parameter_count)

    with pytest.raises(DimensionError):
        IdeSystem.from_config(config, params=ParamVector())
    with pytest.raises(DimensionError):
        system.bind(Tensor(np.zeros(3)))

    solution = solve_ivp(system, [0.1, -0.2], 0.0, 1.0, SolverConfig(grid_size=21))
    assert solution.y.numpy().shape == (21, 2)
    assert np.array_equal(solution.y.numpy()[0], [0.1, -0.2])


def test_kernel_diagonal_mask() -> None:
    times = np.array([0.0, 0.25, 0.75])
    assert np.array_equal(kernel_diagonal_mask(Volterra(), times, 0.0, 1.0), [1.0, 1.0, 1.0])
    assert np.array_equal(kernel_diagonal_mask(Fredholm(a=0.5), times, 0.0, 1.0), [0.0, 0.0, 1.0])


def damped_memory() -> IdeSystem:
    # y' = -y + int_0^t y ds, so y'' + y' - y = 0 with y(0) = 1, y'(0) = -1
    return IdeSystem(
        state_dim=1,
        dynamics=AnalyticDynamics(lambda t, y: -y, 1),
        kernel=AnalyticKernel(unit_kernel, 1, 1),
        integrand=AnalyticIntegrand(lambda states: states, 1, 1),
        interval=Volterra(),
    )


def damped_memory_exact(times: np.ndarray) -> np.ndarray:
    grow = (math.sqrt(5.0) - 1.0) / 2.0
    decay = -(math.sqrt(5.0) + 1.0) / 2.0
    weight = (-1.0 - decay) / (grow - decay)
    return weight * np.exp(grow * times) + (1.0 - weight) * np.exp(decay * times)


@pytest.mark.parametrize(
    ("system", "exact"),
    [
        (memory_only(Volterra()), np.cosh),
        (damped_memory(), damped_memory_exact),
    ],
    ids=["memory_only", "damped_memory"],
)
def test_grid_refinement_is_fourth_order(system: IdeSystem, exact) -> None:  # type: ignore[no-untyped-def]
    errors = []
    for grid_size in (11, 21, 41):
        config = SolverConfig(grid_size=grid_size, max_iter=30, tolerance=1e-14)
        solution = solve_ivp(system, [1.0], 0.0, 1.0, config)
        errors.append(float(np.max(np.abs(solution.y.numpy()[:, 0] - exact(solution.y.times)))))
    assert errors[0] / errors[1] >= 8.0
    assert errors[1] / errors[2] >= 8.0


def test_integral_iterates_carry_node_rates() -> None:
    solution = solve_ivp(memory_only(Volterra()), [1.0], 0.0, 1.0, SolverConfig(grid_size=41))
    assert solution.y.rates is not None
    # y' = int_0^t y ds = sinh(t)
    assert np.allclose(solution.y.rates.data[:, 0], np.sinh(solution.y.times), rtol=0, atol=1e-6)

    free = IdeSystem(state_dim=1, dynamics=AnalyticDynamics(lambda t, y: -y, 1))
    assert solve_ivp(free, [1.0], 0.0, 1.0).y.rates is None


def test_without_a_kernel_the_solver_is_plain_rk4() -> None:
    matrix = np.array([[-0.5, 1.0], [-1.0, -0.5]])

    def field(t: np.ndarray | None, y: np.ndarray) -> np.ndarray:
        return y @ matrix.T

    system = IdeSystem(state_dim=2, dynamics=AnalyticDynamics(field, 2))
    config = SolverConfig(grid_size=21)
    solution = solve_ivp(system, [1.0, 0.5], 0.0, 2.0, config)
    assert solution.iterations_used == 1

    h = (2.0 - 0.0) / 20
    y = np.array([[1.0, 0.5]])
    rows = [y]
    for _ in range(20):
        k1 = field(None, y)
        k2 = field(None, 1.0 * y + (0.5 * h) * k1)
        k3 = field(None, 1.0 * y + (0.5 * h) * k2)
        k4 = field(None, 1.0 * y + h * k3)
        y = 1.0 * y + (h / 6.0) * k1 + (h / 3.0) * k2 + (h / 3.0) * k3 + (h / 6.0) * k4
        rows.append(y)
    assert np.array_equal(solution.y.numpy(), np.concatenate(rows))

    again = iterate_once(system, solution.y, [1.0, 0.5], config)
    assert np.array_equal(again.numpy(), solution.y.numpy())

from __future__ import annotations

import numpy as np
import pytest

from nide import (
    GradcheckConfig,
    GradMode,
    IdeSystem,
    LossSpec,
    ModelConfig,
    SolverConfig,
    Trajectory,
    adjoint_pass,
    compare_gradients,
    compute_gradient,
    grad_adjoint,
    grad_fd,
    grad_unrolled,
    kernel_scale_sweep,
    smoke_suite,
    solve_ivp,
)
from nide._gradients import cosine_similarity, loss_value, relative_error, scale_kernel
from nide._solver import AnalyticDynamics

cases = {case.name: case for case in smoke_suite()}


def test_smoke_suite_sizes() -> None:
    assert list(cases) == ["node_2d", "volterra_2d", "fredholm_2d", "volterra_4d"]
    for case in cases.values():
        assert case.system.state_dim <= 4
        assert case.system.parameter_count <= 100
    assert cases["node_2d"].kernel_free
    assert not cases["volterra_2d"].kernel_free
    assert cases["volterra_2d"].spec.mask is not None


@pytest.mark.parametrize("name", ["node_2d", "volterra_2d", "fredholm_2d", "volterra_4d"])
def test_unrolled_matches_finite_differences(name: str) -> None:
    case = cases[name]
    value, unrolled = grad_unrolled(case.system, case.y0, case.spec, case.solver)
    fd = grad_fd(case.system, case.y0, case.spec, case.solver)
    assert value == pytest.approx(loss_value(case.system, case.y0, case.spec, case.solver), rel=1e-12)
    assert relative_error(unrolled.values, fd.values) <= 1e-4
    assert unrolled.segments == case.system.params.segments


def test_adjoint_matches_unrolled_without_kernel() -> None:
    case = cases["node_2d"]
    value, unrolled = grad_unrolled(case.system, case.y0, case.spec, case.solver)
    adjoint_value, adjoint = grad_adjoint(case.system, case.y0, case.spec, case.solver)
    assert adjoint_value == pytest.approx(value, rel=1e-12)
    assert relative_error(adjoint.values, unrolled.values) <= 1e-4


def test_adjoint_state_at_the_start_is_the_initial_state_gradient() -> None:
    case = cases["node_2d"]
    t0, t1 = float(case.spec.observed.times[0]), float(case.spec.observed.times[-1])
    solution = solve_ivp(case.system, case.y0, t0, t1, case.solver)
    state, grad = adjoint_pass(case.system, solution.y, case.spec, case.solver)
    assert len(state.a) == 2
    assert np.array_equal(state.a_theta, grad.values)

    step = 1e-5
    start = np.asarray(case.y0, dtype=np.float64)
    numeric = np.zeros(2)
    for index in range(2):
        shift = np.zeros(2)
        shift[index] = step
        plus = loss_value(case.system, start + shift, case.spec, case.solver, t0=t0, t1=t1)
        minus = loss_value(case.system, start - shift, case.spec, case.solver, t0=t0, t1=t1)
        numeric[index] = (plus - minus) / (2.0 * step)
    assert relative_error(state.a, numeric) <= 1e-4


def test_adjoint_tracks_unrolled_for_small_kernels() -> None:
    case = cases["volterra_2d"]
    rows = kernel_scale_sweep(case.system, case.y0, case.spec, case.solver, (0.0, 0.01))
    assert [row.scale for row in rows] == [0.0, 0.01]
    assert rows[0].kernel_magnitude == 0.0
    assert rows[1].kernel_magnitude > 0.0
    assert all(row.cosine >= 0.99 for row in rows)


def test_compare_gradients_report() -> None:
    case = cases["node_2d"]
    rows = compare_gradients(case.system, case.y0, case.spec, case.solver)
    assert [(row.mode, row.reference) for row in rows] == [
        ("unrolled", "finite_difference"),
        ("adjoint", "finite_difference"),
        ("adjoint", "unrolled"),
    ]
    assert all(row.cosine > 0.999 for row in rows)
    assert all(row.norm > 0.0 for row in rows)


def test_compute_gradient_dispatch() -> None:
    case = cases["node_2d"]
    value, grad = compute_gradient(case.system, case.y0, case.spec, case.solver, GradMode(kind="finite_difference"))
    assert value == loss_value(case.system, case.y0, case.spec, case.solver)
    _, unrolled = compute_gradient(case.system, case.y0, case.spec, case.solver)
    assert relative_error(grad.values, unrolled.values) <= 1e-4


def test_loss_vanishes_on_its_own_solution() -> None:
    config = ModelConfig(state_dim=2, dynamics_hidden=(4,), kernel_hidden=None, integrand_hidden=None)
    system = IdeSystem.from_config(config, seed=1)
    solver = SolverConfig(grid_size=21)
    times = np.linspace(0.0, 1.0, 5)
    solution = solve_ivp(system, [0.3, -0.1], 0.0, 1.0, solver)
    spec = LossSpec(observed=Trajectory(times=times, states=solution.y.sample_values(times)))
    value, grad = grad_unrolled(system, [0.3, -0.1], spec, solver)
    assert value <= 1e-24
    assert np.max(np.abs(grad.values)) <= 1e-10

    shifted = np.array(spec.observed.states)
    shifted[-1] += 1.0
    masked = LossSpec(observed=Trajectory(times=times, states=shifted), mask=(False, False, False, False, True))
    assert loss_value(system, [0.3, -0.1], masked, solver, t1=1.0) <= 1e-24


def test_gradient_helpers() -> None:
    assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_error([1.0, 3.0], [1.0, 2.0]) == 0.5
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_similarity([0.0], [0.0]) == 1.0
    assert cosine_similarity([2.0, 2.0], [1.0, 1.0]) == pytest.approx(1.0)


def test_invalid_requests() -> None:
    case = cases["node_2d"]
    with pytest.raises(ValueError):
        grad_fd(case.system, case.y0, case.spec, case.solver, step=0.0)
    with pytest.raises(TypeError):
        scale_kernel(case.system, 0.5)

    analytic = IdeSystem(state_dim=2, dynamics=AnalyticDynamics(lambda t, y: -y, 2))
    with pytest.raises(TypeError):
        grad_adjoint(analytic, case.y0, case.spec, case.solver)


def test_gradcheck_config_controls_the_suite() -> None:
    small = smoke_suite(GradcheckConfig(grid_size=21, node_count=4))
    assert all(case.solver.grid_size == 21 for case in small)
    assert all(case.solver.quadrature.node_count == 4 for case in small)

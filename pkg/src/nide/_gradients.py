from __future__ import annotations

import logging
from typing import TYPE_CHECKING

import numpy as np

from nide._autodiff import Tape, Tensor, add, backward, dot, no_record, scale, subtract
from nide._exceptions import DimensionError, NonFiniteError
from nide._models import (
    ArrayModel,
    Fredholm,
    GradcheckConfig,
    GradMode,
    LossSpec,
    ModelConfig,
    ParamVector,
    ParentModel,
    QuadratureRule,
    SolverConfig,
    Trajectory,
)
from nide._nets import DynamicsNet, IntegrandNet, KernelNet
from nide._numerics import IntegralPlan
from nide._solver import IdeSystem, integral_term, kernel_diagonal_mask, local_term, solve_ivp
from nide._types import ReadOnlyArray  # noqa: TC001

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from nide._numerics import GridFunction
    from nide._types import FloatArray

logger = logging.getLogger(__name__)

_TIME_SLACK = 1e-12


def _observations(solution: GridFunction, spec: LossSpec) -> tuple[FloatArray, FloatArray]:
    used = spec.used
    if used.size == 0:
        raise DimensionError("loss needs at least one unmasked observation")
    times = spec.observed.times[used]
    if times[0] < solution.t0 - _TIME_SLACK or times[-1] > solution.t1 + _TIME_SLACK:
        raise DimensionError(
            f"observations span [{times[0]}, {times[-1]}] outside the solution window [{solution.t0}, {solution.t1}]"
        )
    if spec.observed.state_dim != solution.state_dim:
        raise DimensionError(f"observed dimension {spec.observed.state_dim} != solution dimension {solution.state_dim}")
    return times, spec.observed.states[used]


def loss(solution: GridFunction, spec: LossSpec) -> Tensor:
    """
    Mean squared error between the interpolated solution and the unmasked observations.

    The mean runs over every unmasked `(point, dimension)` entry. Recorded on the
    active tape, so the result can be differentiated through the solve.

    Returns
    -------
    Tensor
        A 0-d tensor.

    Raises
    ------
    DimensionError
        If observations fall outside the solution window or dimensions differ.
    """
    times, targets = _observations(solution, spec)
    error = subtract(solution.sample(times), Tensor(targets))
    return scale(dot(error, error), 1.0 / error.size)


def loss_state_gradient(solution: GridFunction, spec: LossSpec) -> tuple[FloatArray, FloatArray]:
    """
    `∂L/∂y(tᵢ)` at every unmasked observation time.

    Returns
    -------
    tuple[numpy.ndarray, numpy.ndarray]
        Observation times `(U,)` and gradients `(U, n)`; these are the adjoint jumps.
    """
    times, targets = _observations(solution, spec)
    predicted = solution.sample_values(times)
    return times, 2.0 * (predicted - targets) / targets.size


def _window(spec: LossSpec, t0: float | None, t1: float | None) -> tuple[float, float]:
    times = spec.observed.times
    start = float(times[0]) if t0 is None else t0
    if t1 is None:
        return start, max(spec.last_used_time, float(times[1]))
    return start, t1


def loss_value(
    system: IdeSystem,
    y0: ArrayLike,
    spec: LossSpec,
    config: SolverConfig | None = None,
    *,
    t0: float | None = None,
    t1: float | None = None,
) -> float:
    """Forward-only loss; the solve window defaults to the first through the last unmasked observation."""
    start, stop = _window(spec, t0, t1)
    with no_record():
        solution = solve_ivp(system, y0, start, stop, config)
        return loss(solution.y, spec).item()


def grad_unrolled(
    system: IdeSystem,
    y0: ArrayLike,
    spec: LossSpec,
    config: SolverConfig | None = None,
    *,
    t0: float | None = None,
    t1: float | None = None,
) -> tuple[float, ParamVector]:
    """
    Exact gradient of the discrete solver program.

    One tape spans every successive-approximation pass, every RK4 stage and the
    loss; a single backward pass gives `dL/dθ`.

    Returns
    -------
    tuple[float, ParamVector]
        The loss and its gradient, laid out like `system.params`.
    """
    start, stop = _window(spec, t0, t1)
    with Tape() as tape:
        theta = Tensor(system.params.values)
        solution = solve_ivp(system, y0, start, stop, config, theta=theta)
        value = loss(solution.y, spec)
    if value.node is None:
        return value.item(), system.params.with_values(np.zeros(system.params.size))
    grads = backward(tape, value)
    return value.item(), system.params.with_values(grads.wrt(theta))


def grad_fd(
    system: IdeSystem,
    y0: ArrayLike,
    spec: LossSpec,
    config: SolverConfig | None = None,
    step: float = 1e-5,
    *,
    t0: float | None = None,
    t1: float | None = None,
) -> ParamVector:
    """
    Central-difference gradient, `2p` forward solves.
    """
    if step <= 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    base = np.array(system.params.values)
    grad = np.zeros_like(base)
    for index in range(base.shape[0]):
        plus = base.copy()
        minus = base.copy()
        plus[index] += step
        minus[index] -= step
        high = loss_value(system.with_params(plus), y0, spec, config, t0=t0, t1=t1)
        low = loss_value(system.with_params(minus), y0, spec, config, t0=t0, t1=t1)
        grad[index] = (high - low) / (2.0 * step)
    return system.params.with_values(grad)


class AdjointState(ParentModel):
    """The augmented adjoint at the start of the window after the backward pass."""

    a: tuple[float, ...]
    """`∂L/∂y(t0)`."""
    a_theta: tuple[float, ...]
    """`∂L/∂θ`."""


def _require_nets(system: IdeSystem) -> None:
    for member, kind in ((system.dynamics, DynamicsNet), (system.kernel, KernelNet), (system.integrand, IntegrandNet)):
        if member is not None and not isinstance(member, kind):
            raise TypeError(f"adjoint gradients need network members, got {type(member).__name__}")


def _state_jacobians(system: IdeSystem, times: FloatArray, states: FloatArray, t0: float, t1: float) -> FloatArray:
    """`J(t) = ∂f/∂y + 1[α(t) ≤ t ≤ β(t)] K(t, t) ∂F/∂y` for every time, `(P, n, n)`."""
    n = system.state_dim
    jac = np.zeros((times.shape[0], n, n))
    if isinstance(system.dynamics, DynamicsNet):
        params = system.net_params(system.dynamics).data
        inputs = np.concatenate([times[:, None], states], axis=1)
        jac += system.dynamics.jacobian(params, inputs)[:, :, 1:]
    if isinstance(system.kernel, KernelNet) and isinstance(system.integrand, IntegrandNet):
        with no_record():
            diagonal = system.kernel.bind_kernel(system.net_params(system.kernel))(times, times).data
        integrand = system.integrand.jacobian(system.net_params(system.integrand).data, states)
        mask = kernel_diagonal_mask(system.interval, times, t0, t1)
        jac += mask[:, None, None] * np.matmul(diagonal, integrand)
    return jac


def adjoint_pass(
    system: IdeSystem,
    solution: GridFunction,
    spec: LossSpec,
    config: SolverConfig | None = None,
) -> tuple[AdjointState, ParamVector]:
    """
    Backward adjoint integration over a stored forward solution.

    `a` starts at zero after `t1`, receives the jump `∂L/∂y(tᵢ)` at every unmasked
    observation, and follows `da/dt = -J(t)ᵀ a` between them (RK4 on the union of
    grid nodes and observation times). The parameter gradient is Simpson's rule
    over that mesh of `aᵀ ∂/∂θ [f(t, y(t)) + ∫ K(t, s) F(y(s)) ds]`,
    with the inner integral by the configured quadrature, obtained from one
    scoped backward pass.

    Returns
    -------
    tuple[AdjointState, ParamVector]
        The adjoint at `t0` and the gradient, laid out like `system.params`.

    Raises
    ------
    NonFiniteError
        If the adjoint becomes NaN or Inf.
    """
    config = SolverConfig() if config is None else config
    _require_nets(system)
    t0, t1 = solution.t0, solution.t1
    jump_times, jumps = loss_state_gradient(solution, spec)
    mesh = np.union1d(solution.times, jump_times)
    widths = np.diff(mesh)[:, None]
    mid = 0.5 * (mesh[:-1] + mesh[1:])
    stamps = np.concatenate([mesh, mid])
    # cubic Hermite midpoints keep the backward pass fourth-order accurate
    on_mesh = solution.sample_values(mesh)
    slopes = local_term(system, solution, mesh) + integral_term(system, solution, mesh, config)
    halfway = 0.5 * (on_mesh[:-1] + on_mesh[1:]) + widths / 8.0 * (slopes[:-1] - slopes[1:])
    states_at = np.concatenate([on_mesh, halfway])
    jac = _state_jacobians(system, stamps, states_at, t0, t1)
    transposed = np.swapaxes(jac, 1, 2)
    nodes = transposed[: mesh.shape[0]]
    middles = transposed[mesh.shape[0] :]

    jump_at = np.zeros((mesh.shape[0], system.state_dim))
    np.add.at(jump_at, np.searchsorted(mesh, jump_times), jumps)

    points = mesh.shape[0]
    right = np.zeros((points - 1, system.state_dim))
    left = np.zeros((points - 1, system.state_dim))
    a = jump_at[-1].copy()
    for j in range(points - 2, -1, -1):
        h = mesh[j + 1] - mesh[j]
        right[j] = a
        g1 = nodes[j + 1] @ a
        g2 = middles[j] @ (a + 0.5 * h * g1)
        g3 = middles[j] @ (a + 0.5 * h * g2)
        g4 = nodes[j] @ (a + h * g3)
        a = a + h / 6.0 * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"adjoint became non-finite at t={mesh[j]}")
        left[j] = a
        a = a + jump_at[j]

    # Simpson over every mesh interval, with the adjoint at the midpoint by Hermite interpolation
    centre = 0.5 * (left + right) + widths / 8.0 * (
        np.einsum("pij,pj->pi", -nodes[:-1], left) + np.einsum("pij,pj->pi", nodes[1:], right)
    )
    coefficients = np.zeros((stamps.shape[0], system.state_dim))
    coefficients[: points - 1] += widths / 6.0 * left
    coefficients[1:points] += widths / 6.0 * right
    coefficients[points:] = 4.0 * widths / 6.0 * centre

    with Tape() as tape:
        theta = Tensor(system.params.values)
        bound = system.bind(theta)
        states = Tensor(states_at)
        weights = Tensor(coefficients)
        total: Tensor | None = None
        if bound.rate is not None:
            total = dot(bound.rate(stamps, states), weights)
        if bound.kernel is not None and bound.integrand is not None:
            lower, upper = system.interval.limits(stamps, t0, t1)
            plan = IntegralPlan(stamps, lower, upper, config.quadrature, solution.times)
            frozen = Tensor(solution.values.data)
            slopes_at = None if solution.rates is None else Tensor(solution.rates.data)
            term = dot(plan.evaluate(plan.kernel_values(bound.kernel), bound.integrand, frozen, slopes_at), weights)
            total = term if total is None else add(total, term)
    grad = np.zeros(system.params.size) if total is None else backward(tape, total).wrt(theta)
    state = AdjointState(a=tuple(float(value) for value in a), a_theta=tuple(float(value) for value in grad))
    return state, system.params.with_values(grad)


def grad_adjoint(
    system: IdeSystem,
    y0: ArrayLike,
    spec: LossSpec,
    config: SolverConfig | None = None,
    *,
    t0: float | None = None,
    t1: float | None = None,
) -> tuple[float, ParamVector]:
    """
    Gradient by the adjoint method.

    The forward solution is computed once and reused, by interpolation, during
    the backward pass. Only the diagonal `K(t, t) F'(y(t))` contribution of the
    integral term enters the adjoint dynamics, so for strongly non-local systems
    the result departs from [`grad_unrolled`][nide.grad_unrolled].

    Returns
    -------
    tuple[float, ParamVector]
        The loss and its gradient, laid out like `system.params`.
    """
    start, stop = _window(spec, t0, t1)
    with no_record():
        solution = solve_ivp(system, y0, start, stop, config)
        value = loss(solution.y, spec).item()
    _, grad = adjoint_pass(system, solution.y, spec, config)
    return value, grad


def compute_gradient(
    system: IdeSystem,
    y0: ArrayLike,
    spec: LossSpec,
    config: SolverConfig | None = None,
    mode: GradMode | None = None,
    *,
    t0: float | None = None,
    t1: float | None = None,
) -> tuple[float, ParamVector]:
    """Dispatch on [`GradMode`][nide.GradMode]."""
    mode = GradMode() if mode is None else mode
    if mode.kind == "adjoint":
        return grad_adjoint(system, y0, spec, config, t0=t0, t1=t1)
    if mode.kind == "finite_difference":
        value = loss_value(system, y0, spec, config, t0=t0, t1=t1)
        return value, grad_fd(system, y0, spec, config, mode.step, t0=t0, t1=t1)
    return grad_unrolled(system, y0, spec, config, t0=t0, t1=t1)


def relative_error(estimate: ArrayLike, reference: ArrayLike) -> float:
    """`max|estimate - reference| / max(max|reference|, 1e-12)`."""
    g = np.asarray(estimate, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if g.size == 0:
        return 0.0
    return float(np.max(np.abs(g - r)) / max(float(np.max(np.abs(r))), 1e-12))


def cosine_similarity(estimate: ArrayLike, reference: ArrayLike) -> float:
    """Cosine of the angle between two gradients; 1 when both are zero."""
    g = np.asarray(estimate, dtype=np.float64).reshape(-1)
    r = np.asarray(reference, dtype=np.float64).reshape(-1)
    norms = float(np.linalg.norm(g)) * float(np.linalg.norm(r))
    if norms == 0.0:
        return 1.0 if not (np.any(g) or np.any(r)) else 0.0
    return float(np.dot(g, r) / norms)


class GradientComparison(ParentModel):
    """One row of a gradient report: `mode` measured against `reference`."""

    mode: str
    reference: str
    loss: float
    norm: float
    cosine: float
    relative_error: float


class KernelScaleRow(ParentModel):
    """Adjoint vs unrolled agreement at one kernel magnitude."""

    scale: float
    kernel_magnitude: float
    """Largest `|K(t, s)|` entry over the solve window."""
    cosine: float
    relative_error: float


def compare_gradients(
    system: IdeSystem,
    y0: ArrayLike,
    spec: LossSpec,
    config: SolverConfig | None = None,
    *,
    fd_step: float = 1e-5,
) -> tuple[GradientComparison, ...]:
    """
    Run every gradient mode and measure each against the more exact ones.

    Returns
    -------
    tuple[GradientComparison, ...]
        Rows `unrolled/finite_difference`, `adjoint/finite_difference` and
        `adjoint/unrolled`.
    """
    value, unrolled = grad_unrolled(system, y0, spec, config)
    _, adjoint = grad_adjoint(system, y0, spec, config)
    fd = grad_fd(system, y0, spec, config, fd_step)
    grads = {"unrolled": unrolled.values, "adjoint": adjoint.values, "finite_difference": fd.values}
    rows = []
    for mode, reference in (
        ("unrolled", "finite_difference"),
        ("adjoint", "finite_difference"),
        ("adjoint", "unrolled"),
    ):
        rows.append(
            GradientComparison(
                mode=mode,
                reference=reference,
                loss=value,
                norm=float(np.linalg.norm(grads[mode])),
                cosine=cosine_similarity(grads[mode], grads[reference]),
                relative_error=relative_error(grads[mode], grads[reference]),
            )
        )
        logger.debug("%s vs %s: %s", mode, reference, rows[-1])
    return tuple(rows)


def scale_kernel(system: IdeSystem, factor: float) -> IdeSystem:
    """
    Multiply the kernel by `factor` by scaling the final affine layer of the kernel network.
    """
    if not isinstance(system.kernel, KernelNet):
        raise TypeError("kernel scaling needs a kernel network")
    last = len(system.kernel.spec.layer_shapes) - 1
    values = np.array(system.params.values)
    for part in ("weight", "bias"):
        segment = system.params.segment(f"{system.kernel.name}.{last}.{part}")
        values[segment.offset : segment.stop] *= factor
    return system.with_params(values)


def kernel_scale_sweep(
    system: IdeSystem,
    y0: ArrayLike,
    spec: LossSpec,
    config: SolverConfig | None = None,
    scales: tuple[float, ...] = (0.0, 0.001, 0.01, 0.1, 1.0),
) -> tuple[KernelScaleRow, ...]:
    """
    How far the adjoint gradient drifts from the unrolled one as the kernel grows.
    """
    start, stop = _window(spec, None, None)
    grid = np.linspace(start, stop, 17)
    t, s = (axis.reshape(-1) for axis in np.meshgrid(grid, grid, indexing="ij"))
    rows = []
    for factor in scales:
        scaled = scale_kernel(system, factor)
        assert isinstance(scaled.kernel, KernelNet)
        with no_record():
            magnitude = float(np.max(np.abs(scaled.kernel.bind_kernel(scaled.net_params(scaled.kernel))(t, s).data)))
        _, unrolled = grad_unrolled(scaled, y0, spec, config)
        _, adjoint = grad_adjoint(scaled, y0, spec, config)
        rows.append(
            KernelScaleRow(
                scale=factor,
                kernel_magnitude=magnitude,
                cosine=cosine_similarity(adjoint.values, unrolled.values),
                relative_error=relative_error(adjoint.values, unrolled.values),
            )
        )
        logger.info(
            "kernel scale %g: |K| <= %.3e, cosine %.6f, relative error %.3e",
            factor,
            magnitude,
            rows[-1].cosine,
            rows[-1].relative_error,
        )
    return tuple(rows)


class SmokeCase(ArrayModel):
    """A small system with an observation to check gradients on."""

    name: str
    system: IdeSystem
    y0: ReadOnlyArray
    spec: LossSpec
    solver: SolverConfig

    @property
    def kernel_free(self) -> bool:
        return not self.system.has_integral


def smoke_suite(config: GradcheckConfig | None = None) -> tuple[SmokeCase, ...]:
    """
    The gradient-check systems: at most four states and 100 parameters each.

    The solver runs to a tolerance of `1e-12` so that finite differences never
    straddle a change in the number of passes.
    """
    config = GradcheckConfig() if config is None else config
    solver = SolverConfig(
        grid_size=config.grid_size,
        max_iter=50,
        tolerance=1e-12,
        quadrature=QuadratureRule(node_count=config.node_count),
    )
    times = np.linspace(0.0, 1.0, 6)
    templates = (
        ("node_2d", ModelConfig(state_dim=2, dynamics_hidden=(6,), kernel_hidden=None, integrand_hidden=None), None),
        (
            "volterra_2d",
            ModelConfig(state_dim=2, dynamics_hidden=(3,), kernel_hidden=(3,), integrand_hidden=(3,), init_scale=0.5),
            (False, False, False, False, False, True),
        ),
        (
            "fredholm_2d",
            ModelConfig(
                state_dim=2,
                dynamics_hidden=(3,),
                kernel_hidden=(3,),
                integrand_hidden=(3,),
                interval=Fredholm(),
                init_scale=0.5,
            ),
            None,
        ),
        (
            "volterra_4d",
            ModelConfig(
                state_dim=4,
                latent_dim=2,
                dynamics_hidden=(3,),
                kernel_hidden=(3,),
                integrand_hidden=(3,),
                init_scale=0.5,
            ),
            None,
        ),
    )
    cases = []
    for index, (name, template, mask) in enumerate(templates):
        phases = np.arange(template.state_dim)[None, :]
        observed = Trajectory(times=times, states=0.5 * np.sin(2.0 * times[:, None] + phases))
        cases.append(
            SmokeCase(
                name=name,
                system=IdeSystem.from_config(template, seed=index),
                y0=observed.initial_state,
                spec=LossSpec(observed=observed, mask=mask),
                solver=solver,
            )
        )
    return tuple(cases)

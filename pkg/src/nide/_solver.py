"""
Successive-approximation solver for

    dy/dt = f(t, y) + ∫_{α(t)}^{β(t)} K(t, s) F(y(s)) ds,    y(t0) = y0.

Starting from the constant iterate `y⁰ ≡ y0`, each pass integrates the ODE obtained
by freezing the previous iterate inside the integral, on a uniform grid with RK4
(or Euler). The integral is re-evaluated at every stage time, reading the frozen
iterate by cubic Hermite interpolation of its node values and rates, so RK4 keeps
its fourth order.
"""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Callable, NamedTuple, Union

import numpy as np
from pydantic import NonNegativeFloat, NonNegativeInt

from nide._autodiff import Tensor, add, concat, matmul, no_record, take, weighted_sum
from nide._exceptions import DimensionError, SolverError
from nide._models import ArrayModel, IntervalSpec, ModelConfig, ParamVector, SolverConfig, Volterra
from nide._nets import DynamicsNet, IntegrandNet, KernelNet, Mlp
from nide._numerics import GridFunction, IntegralPlan
from nide._utils import substream_seed

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from nide._types import FloatArray

logger = logging.getLogger(__name__)

RateFn = Callable[["FloatArray", Tensor], Tensor]
KernelFn = Callable[["FloatArray", "FloatArray"], Tensor]
IntegrandFn = Callable[[Tensor], Tensor]


class AnalyticDynamics:
    """
    A fixed local term from a numpy function `fn(times (P,), states (P, n)) -> (P, n)`.

    Analytic members are forward-only: they produce constants on the tape.
    """

    name = "dynamics"

    def __init__(self, fn: Callable[[FloatArray, FloatArray], FloatArray], state_dim: int) -> None:
        self.fn = fn
        self.state_dim = state_dim

    def bind_rate(self, params: Tensor | None = None) -> RateFn:
        def rate(times: FloatArray, states: Tensor) -> Tensor:
            return Tensor(self.fn(np.asarray(times, dtype=np.float64).reshape(-1), states.data))

        return rate


class AnalyticKernel:
    """A fixed kernel from `fn(t (P,), s (P,)) -> (P, n, m)`."""

    name = "kernel"

    def __init__(self, fn: Callable[[FloatArray, FloatArray], FloatArray], state_dim: int, latent_dim: int) -> None:
        self.fn = fn
        self.state_dim = state_dim
        self.latent_dim = latent_dim

    def bind_kernel(self, params: Tensor | None = None) -> KernelFn:
        def kernel(t: FloatArray, s: FloatArray) -> Tensor:
            return Tensor(self.fn(np.ravel(t).astype(np.float64), np.ravel(s).astype(np.float64)))

        return kernel


class AnalyticIntegrand:
    """A fixed integrand from `fn(states (P, n)) -> (P, m)`."""

    name = "integrand"

    def __init__(self, fn: Callable[[FloatArray], FloatArray], state_dim: int, latent_dim: int) -> None:
        self.fn = fn
        self.state_dim = state_dim
        self.latent_dim = latent_dim

    def bind_map(self, params: Tensor | None = None) -> IntegrandFn:
        def integrand(states: Tensor) -> Tensor:
            return Tensor(self.fn(states.data))

        return integrand


Dynamics = Union[DynamicsNet, AnalyticDynamics]
Kernel = Union[KernelNet, AnalyticKernel]
Integrand = Union[IntegrandNet, AnalyticIntegrand]


class BoundSystem(NamedTuple):
    """The right-hand side members with parameters fixed for one solve."""

    rate: RateFn | None
    kernel: KernelFn | None
    integrand: IntegrandFn | None


class IdeSystem:
    """
    The triple `(f, K, F)` with its interval family and parameters.

    Parameters
    ----------
    state_dim : int
        State dimension `n`.
    latent_dim : int, optional
        Integrand output dimension `m`, defaults to `n`.
    dynamics : DynamicsNet or AnalyticDynamics, optional
        Local term `f`; absent means `f ≡ 0`.
    kernel : KernelNet or AnalyticKernel, optional
        Kernel `K`; absent (together with `integrand`) means `K ≡ 0`.
    integrand : IntegrandNet or AnalyticIntegrand, optional
        Integrand `F`.
    interval : Volterra or Fredholm, optional
        Integration limits, `Volterra()` by default.
    params : ParamVector, optional
        Parameters of every network member, laid out as `{net}.{layer}.weight/bias`.

    Raises
    ------
    DimensionError
        If the members' dimensions disagree or `params` does not fit the networks.
    """

    def __init__(
        self,
        *,
        state_dim: int,
        latent_dim: int | None = None,
        dynamics: Dynamics | None = None,
        kernel: Kernel | None = None,
        integrand: Integrand | None = None,
        interval: IntervalSpec | None = None,
        params: ParamVector | None = None,
    ) -> None:
        self.state_dim = state_dim
        self.latent_dim = state_dim if latent_dim is None else latent_dim
        self.dynamics = dynamics
        self.kernel = kernel
        self.integrand = integrand
        self.interval: IntervalSpec = Volterra() if interval is None else interval
        self.params = ParamVector() if params is None else params
        self._validate()

    def _validate(self) -> None:
        n, m = self.state_dim, self.latent_dim
        if (self.kernel is None) != (self.integrand is None):
            raise DimensionError("kernel and integrand must be both present or both absent")
        if self.dynamics is not None and self.dynamics.state_dim != n:
            raise DimensionError(f"dynamics works on dimension {self.dynamics.state_dim}, system on {n}")
        if self.kernel is not None and (self.kernel.state_dim, self.kernel.latent_dim) != (n, m):
            raise DimensionError(
                f"kernel is {self.kernel.state_dim}x{self.kernel.latent_dim}, system needs {n}x{m}"
            )
        if self.integrand is not None and (self.integrand.state_dim, self.integrand.latent_dim) != (n, m):
            raise DimensionError(
                f"integrand maps {self.integrand.state_dim} -> {self.integrand.latent_dim}, system needs {n} -> {m}"
            )
        expected = sum(net.parameter_count for net in self.nets)
        if expected != self.params.size:
            raise DimensionError(f"networks need {expected} parameters, got {self.params.size}")
        for net in self.nets:
            start, stop = self.params.span(net.name)
            if stop - start != net.parameter_count:
                raise DimensionError(f"{net.name}: parameter segments hold {stop - start} values")

    def __repr__(self) -> str:
        members = ", ".join(
            f"{label}={member!r}"
            for label, member in (("f", self.dynamics), ("K", self.kernel), ("F", self.integrand))
            if member is not None
        )
        return f"IdeSystem(n={self.state_dim}, m={self.latent_dim}, {members}, interval={self.interval!r})"

    @classmethod
    def from_config(cls, config: ModelConfig, *, seed: int = 0, params: ParamVector | None = None) -> IdeSystem:
        """
        Build the networks a template describes, freshly initialized unless `params` is given.

        Each network draws from its own `init` sub-stream of `seed`.
        """
        dynamics = DynamicsNet(config.dynamics_spec) if config.dynamics_spec is not None else None
        kernel = KernelNet(config.kernel_spec, config.state_dim) if config.kernel_spec is not None else None
        integrand = IntegrandNet(config.integrand_spec) if config.integrand_spec is not None else None
        if params is None:
            params = ParamVector.concatenate(
                *(
                    net.init_params(substream_seed(seed, "init", index), scale=config.init_scale)
                    for index, net in enumerate((dynamics, kernel, integrand))
                    if net is not None
                )
            )
        return cls(
            state_dim=config.state_dim,
            latent_dim=config.m,
            dynamics=dynamics,
            kernel=kernel,
            integrand=integrand,
            interval=config.interval,
            params=params,
        )

    @property
    def nets(self) -> list[Mlp]:
        """Network members in parameter order."""
        return [member for member in (self.dynamics, self.kernel, self.integrand) if isinstance(member, Mlp)]

    @property
    def has_integral(self) -> bool:
        return self.kernel is not None

    @property
    def parameter_count(self) -> int:
        return self.params.size

    def with_params(self, values: FloatArray) -> IdeSystem:
        """Same members, new parameter values."""
        return IdeSystem(
            state_dim=self.state_dim,
            latent_dim=self.latent_dim,
            dynamics=self.dynamics,
            kernel=self.kernel,
            integrand=self.integrand,
            interval=self.interval,
            params=self.params.with_values(values),
        )

    def net_params(self, net: Mlp, theta: Tensor | None = None) -> Tensor:
        """The slice of `theta` (default: the stored parameters) that belongs to `net`."""
        flat = Tensor(self.params.values) if theta is None else theta
        start, stop = self.params.span(net.name)
        return take(flat, slice(start, stop))

    def bind(self, theta: Tensor | None = None) -> BoundSystem:
        """
        Fix the parameters for one solve.

        Parameters
        ----------
        theta : Tensor, optional
            Flat parameters to use instead of the stored ones; pass a tape leaf
            to differentiate with respect to it.
        """
        if theta is not None and theta.shape != (self.params.size,):
            raise DimensionError(f"expected {self.params.size} parameters, got shape {theta.shape}")
        flat = Tensor(self.params.values) if theta is None else theta

        def member_params(member: object) -> Tensor | None:
            return self.net_params(member, flat) if isinstance(member, Mlp) else None

        rate = None if self.dynamics is None else self.dynamics.bind_rate(member_params(self.dynamics))
        kernel = None if self.kernel is None else self.kernel.bind_kernel(member_params(self.kernel))
        integrand = None if self.integrand is None else self.integrand.bind_map(member_params(self.integrand))
        return BoundSystem(rate, kernel, integrand)


class Solution(ArrayModel):
    """Outcome of [`solve_ivp`][nide.solve_ivp]."""

    y: GridFunction
    """Final iterate."""
    iterations_used: NonNegativeInt
    final_residual: NonNegativeFloat
    """Relative sup-norm change made by the last pass."""
    converged: bool
    changes: tuple[float, ...] = ()
    """Relative change of every pass, in order."""


def relative_change(previous: FloatArray, current: FloatArray) -> float:
    """`sup|current - previous| / max(sup|previous|, 1)`."""
    return float(np.max(np.abs(current - previous)) / max(float(np.max(np.abs(previous))), 1.0))


def _stage_times(grid: FloatArray, stepper: str) -> FloatArray:
    if stepper == "euler":
        return grid
    stages = np.empty(2 * grid.shape[0] - 1)
    stages[0::2] = grid
    stages[1::2] = 0.5 * (grid[:-1] + grid[1:])
    return stages


class _Pass:
    """Everything one solve reuses across its successive-approximation passes."""

    def __init__(
        self,
        system: IdeSystem,
        y0: FloatArray,
        t0: float,
        t1: float,
        config: SolverConfig,
        theta: Tensor | None,
    ) -> None:
        self.system = system
        self.config = config
        self.t0 = t0
        self.t1 = t1
        self.grid = np.linspace(t0, t1, config.grid_size)
        self.step = (t1 - t0) / (config.grid_size - 1)
        self.y0 = Tensor(np.asarray(y0, dtype=np.float64).reshape(1, -1))
        self.bound = system.bind(theta)
        self.stages = _stage_times(self.grid, config.stepper)
        self.plan: IntegralPlan | None = None
        self.kernel_values: Tensor | None = None
        if system.has_integral:
            lower, upper = system.interval.limits(self.stages, t0, t1)
            self.plan = IntegralPlan(self.stages, lower, upper, config.quadrature, self.grid)
            assert self.bound.kernel is not None
            self.kernel_values = self.plan.kernel_values(self.bound.kernel)

    def constant(self) -> GridFunction:
        ones = Tensor(np.ones((self.config.grid_size, 1)))
        return GridFunction(self.t0, self.t1, matmul(ones, self.y0))

    def integral(self, current: GridFunction) -> Tensor | None:
        if self.plan is None:
            return None
        assert self.kernel_values is not None and self.bound.integrand is not None
        rates = current.rates if current.rates is not None and current.grid_size == self.config.grid_size else None
        return self.plan.evaluate(self.kernel_values, self.bound.integrand, current.values, rates)

    def run(self, current: GridFunction, iteration: int) -> GridFunction:
        integral = self.integral(current)
        if self.bound.rate is None:
            values, rates = self._accumulate(integral)
        else:
            values, rates = self._march(integral, iteration)
        if not np.all(np.isfinite(values.data)):
            time = float(self.grid[int(np.argmax(~np.all(np.isfinite(values.data), axis=1)))])
            raise SolverError(f"non-finite state in iterate {iteration} at t={time}", iteration=iteration, time=time)
        return GridFunction(self.t0, self.t1, values, rates)

    def _accumulate(self, integral: Tensor | None) -> tuple[Tensor, Tensor | None]:
        """Without a local term each step only integrates the frozen integral term."""
        size = self.config.grid_size
        ones = Tensor(np.ones((size, 1)))
        start = matmul(ones, self.y0)
        if integral is None:
            return start, None
        cumulative = np.zeros((size, integral.shape[0]))
        h = self.step
        if self.config.stepper == "euler":
            for k in range(1, size):
                cumulative[k, :k] = h
            rates = integral
        else:
            for k in range(1, size):
                cumulative[k, 0 : 2 * k : 2] += h / 6.0
                cumulative[k, 2 : 2 * k + 1 : 2] += h / 6.0
                cumulative[k, 1 : 2 * k : 2] = 4.0 * h / 6.0
            rates = take(integral, np.arange(0, integral.shape[0], 2))
        return add(start, matmul(Tensor(cumulative), integral)), rates

    def _march(self, integral: Tensor | None, iteration: int) -> tuple[Tensor, Tensor | None]:
        assert self.bound.rate is not None
        rate = self.bound.rate
        h = self.step
        euler = self.config.stepper == "euler"

        def rhs(t: float, state: Tensor, stage: int) -> Tensor:
            value = rate(np.array([t]), state)
            if integral is None:
                return value
            return add(value, take(integral, slice(stage, stage + 1)))

        rows = [self.y0]
        slopes: list[Tensor] = []
        state = self.y0
        for k in range(self.config.grid_size - 1):
            t = float(self.grid[k])
            if euler:
                k1 = rhs(t, state, k)
                state = weighted_sum([1.0, h], [state, k1])
            else:
                mid = t + 0.5 * h
                k1 = rhs(t, state, 2 * k)
                k2 = rhs(mid, weighted_sum([1.0, 0.5 * h], [state, k1]), 2 * k + 1)
                k3 = rhs(mid, weighted_sum([1.0, 0.5 * h], [state, k2]), 2 * k + 1)
                k4 = rhs(float(self.grid[k + 1]), weighted_sum([1.0, h], [state, k3]), 2 * k + 2)
                state = weighted_sum([1.0, h / 6.0, h / 3.0, h / 3.0, h / 6.0], [state, k1, k2, k3, k4])
            if not np.all(np.isfinite(state.data)):
                time = float(self.grid[k + 1])
                message = f"non-finite state in iterate {iteration} at t={time}"
                raise SolverError(message, iteration=iteration, time=time)
            rows.append(state)
            slopes.append(k1)
        if integral is None:
            return concat(rows, axis=0), None
        # the first stage of every step is the slope at its left node; the last node needs its own
        slopes.append(rhs(float(self.grid[-1]), state, integral.shape[0] - 1))
        return concat(rows, axis=0), concat(slopes, axis=0)


def _check_problem(system: IdeSystem, y0: ArrayLike, t0: float, t1: float) -> FloatArray:
    initial = np.asarray(y0, dtype=np.float64).reshape(-1)
    if initial.shape != (system.state_dim,):
        raise DimensionError(f"initial state has {initial.shape[0]} entries, system dimension is {system.state_dim}")
    if not t0 < t1:
        raise DimensionError(f"solve window needs t0 < t1, got [{t0}, {t1}]")
    if not np.all(np.isfinite(initial)):
        raise SolverError("non-finite initial state", iteration=0, time=t0)
    return initial


def solve_ivp(
    system: IdeSystem,
    y0: ArrayLike,
    t0: float,
    t1: float,
    config: SolverConfig | None = None,
    *,
    theta: Tensor | None = None,
) -> Solution:
    """
    Solve the initial-value problem by successive approximation.

    Parameters
    ----------
    system : IdeSystem
        Right-hand side.
    y0 : array_like
        Initial state, `(n,)`.
    t0, t1 : float
        Solve window, `t0 < t1`.
    config : SolverConfig, optional
        Grid, iteration and quadrature controls.
    theta : Tensor, optional
        Parameters to solve with instead of the stored ones. Recording on an
        active tape makes the whole solve differentiable in `theta`.

    Returns
    -------
    Solution
        The last iterate. Non-convergence is reported, not raised.

    Raises
    ------
    DimensionError
        If `y0` or `theta` have the wrong size or the window is empty.
    SolverError
        If a state becomes NaN or Inf.
    """
    config = SolverConfig() if config is None else config
    initial = _check_problem(system, y0, t0, t1)
    solve = _Pass(system, initial, float(t0), float(t1), config, theta)
    current = solve.constant()
    changes: list[float] = []
    converged = False
    for iteration in range(1, config.max_iter + 1):
        following = solve.run(current, iteration)
        change = relative_change(current.values.data, following.values.data)
        changes.append(change)
        current = following
        logger.debug("iterate %d: relative change %.3e", iteration, change)
        if not system.has_integral or change <= config.tolerance:
            converged = True
            break
    if not converged:
        logger.warning(
            "solver did not converge after %d iterations (last change %.3e > %.1e)",
            config.max_iter,
            changes[-1],
            config.tolerance,
        )
    final = 0.0 if not system.has_integral else changes[-1]
    return Solution(
        y=current, iterations_used=len(changes), final_residual=final, converged=converged, changes=tuple(changes)
    )


def iterate_once(
    system: IdeSystem,
    current: GridFunction,
    y0: ArrayLike,
    config: SolverConfig | None = None,
    *,
    theta: Tensor | None = None,
) -> GridFunction:
    """
    One successive-approximation pass with `current` frozen inside the integral.

    The result lives on a grid of `config.grid_size` nodes over `current`'s window.
    """
    config = SolverConfig() if config is None else config
    initial = _check_problem(system, y0, current.t0, current.t1)
    solve = _Pass(system, initial, current.t0, current.t1, config, theta)
    if current.grid_size != config.grid_size:
        current = GridFunction(current.t0, current.t1, current.sample(solve.grid))
    return solve.run(current, 1)


def local_term(system: IdeSystem, path: GridFunction, times: ArrayLike) -> FloatArray:
    """`f(t, y(t))` along `path`, `(P, n)`; zeros without a local term."""
    stamps = np.atleast_1d(np.asarray(times, dtype=np.float64))
    with no_record():
        bound = system.bind()
        if bound.rate is None:
            return np.zeros((stamps.shape[0], system.state_dim))
        return np.array(bound.rate(stamps, Tensor(path.sample_values(stamps))).data)


def integral_term(
    system: IdeSystem, path: GridFunction, times: ArrayLike, config: SolverConfig | None = None
) -> FloatArray:
    """`∫_{α(t)}^{β(t)} K(t, s) F(y(s)) ds` along `path`, `(P, n)`; zeros when `K ≡ 0`."""
    config = SolverConfig() if config is None else config
    stamps = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if not system.has_integral:
        return np.zeros((stamps.shape[0], system.state_dim))
    with no_record():
        bound = system.bind()
        assert bound.kernel is not None and bound.integrand is not None
        lower, upper = system.interval.limits(stamps, path.t0, path.t1)
        plan = IntegralPlan(stamps, lower, upper, config.quadrature, path.times)
        values = plan.evaluate(plan.kernel_values(bound.kernel), bound.integrand, path.values, path.rates)
        return np.array(values.data)


def residual(system: IdeSystem, path: GridFunction, config: SolverConfig | None = None) -> float:
    """
    How far `path` is from satisfying the IDE.

    Returns
    -------
    float
        `max |(y_{k+1} - y_{k-1}) / 2h - f - integral term|` over interior grid nodes.
    """
    if path.grid_size < 3:
        return 0.0
    values = path.values.data
    interior = path.times[1:-1]
    central = (values[2:] - values[:-2]) / (2.0 * path.step)
    rhs = local_term(system, path, interior) + integral_term(system, path, interior, config)
    return float(np.max(np.abs(central - rhs)))


def kernel_diagonal_mask(interval: IntervalSpec, times: FloatArray, t0: float, t1: float) -> FloatArray:
    """1 where `α(t) ≤ t ≤ β(t)`, else 0."""
    lower, upper = interval.limits(times, t0, t1)
    return ((lower <= times) & (times <= upper)).astype(np.float64)


from __future__ import annotations

import logging
import math
from pathlib import Path  # noqa: TC003
from typing import TYPE_CHECKING, Callable

import numpy as np

from nide._analysis import Decomposition, count_self_intersections
from nide._autodiff import no_record
from nide._exceptions import GenerationError, SolverError
from nide._io import write_generated
from nide._models import ArrayModel, Dataset, GeneratorSpec, SolverConfig, Trajectory, Volterra
from nide._solver import (
    AnalyticDynamics,
    AnalyticIntegrand,
    AnalyticKernel,
    IdeSystem,
    integral_term,
    local_term,
    residual,
    solve_ivp,
)
from nide._training import _map
from nide._utils import format_float, substream

if TYPE_CHECKING:
    from nide._types import FloatArray, StrPath

logger = logging.getLogger(__name__)

ROTATION = np.array([[0.0, -1.0], [1.0, 0.0]])


class GeneratorSystem(ArrayModel):
    """An analytic IDE with the defaults it is sampled with."""

    name: str
    version: int
    system: IdeSystem
    window: tuple[float, float]
    ic_low: float
    ic_high: float
    scale: float | None
    """Kernel scale γ; `None` for systems without an integral term."""

    @property
    def ident(self) -> str:
        """`name@version`, the identifier experiments cite."""
        return f"{self.name}@{self.version}"


def _linear(matrix: FloatArray) -> Callable[[FloatArray, FloatArray], FloatArray]:
    def rate(times: FloatArray, states: FloatArray) -> FloatArray:
        return states @ matrix.T

    return rate


def _cosh_clipped(projection: FloatArray | None = None) -> Callable[[FloatArray], FloatArray]:
    def integrand(states: FloatArray) -> FloatArray:
        latent = states if projection is None else states @ projection.T
        return np.cosh(np.clip(latent, -3.0, 3.0))

    return integrand


def ide_spiral_2d(scale: float = 0.1) -> GeneratorSystem:
    """
    Rotating 2-D flow with a trigonometric memory kernel.

    `f(t, y) = 0.5 R y` with `R` the quarter-turn rotation,
    `K(t, s) = γ [[cos(t-s), sin(2s)], [-sin(t-s), cos(2t)]]`,
    `F(y) = cosh(clip(y, -3, 3))`, Volterra from 0 on `[0, 5]`.

    Version 1 applies `F` without a shift, so `F(0) = [1, 1]`; a system that
    subtracts 1 from `F` would have to ship as a new version.
    """

    def kernel(t: FloatArray, s: FloatArray) -> FloatArray:
        rows = [
            [np.cos(t - s), np.sin(2.0 * s)],
            [-np.sin(t - s), np.cos(2.0 * t)],
        ]
        return scale * np.moveaxis(np.array(rows), -1, 0)

    system = IdeSystem(
        state_dim=2,
        dynamics=AnalyticDynamics(_linear(0.5 * ROTATION), 2),
        kernel=AnalyticKernel(kernel, 2, 2),
        integrand=AnalyticIntegrand(_cosh_clipped(), 2, 2),
        interval=Volterra(a=0.0),
    )
    return GeneratorSystem(
        name="ide_spiral_2d", version=1, system=system, window=(0.0, 5.0), ic_low=-1.0, ic_high=1.0, scale=scale
    )


def ide_curves_4d(scale: float = 0.1) -> GeneratorSystem:
    """
    Two coupled rotations in 4-D with a rectangular `4 x 2` kernel over a 2-D latent space.

    `F(y) = cosh(clip(P y, -3, 3))` where `P` averages the two planes.
    """
    block = np.zeros((4, 4))
    block[:2, :2] = 0.5 * ROTATION
    block[2:, 2:] = 0.25 * ROTATION
    projection = 0.5 * np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]])

    def kernel(t: FloatArray, s: FloatArray) -> FloatArray:
        rows = [
            [np.cos(t - s), np.sin(s)],
            [-np.sin(t - s), np.cos(t)],
            [np.sin(2.0 * s), np.cos(t - s)],
            [np.cos(2.0 * t), -np.sin(t - s)],
        ]
        return scale * np.moveaxis(np.array(rows), -1, 0)

    system = IdeSystem(
        state_dim=4,
        latent_dim=2,
        dynamics=AnalyticDynamics(_linear(block), 4),
        kernel=AnalyticKernel(kernel, 4, 2),
        integrand=AnalyticIntegrand(_cosh_clipped(projection), 4, 2),
        interval=Volterra(a=0.0),
    )
    return GeneratorSystem(
        name="ide_curves_4d", version=1, system=system, window=(0.0, 5.0), ic_low=-1.0, ic_high=1.0, scale=scale
    )


def ode_spiral_2d() -> GeneratorSystem:
    """Damped rotation `f(t, y) = [[-0.1, -1], [1, -0.1]] y` without memory."""
    matrix = np.array([[-0.1, -1.0], [1.0, -0.1]])
    system = IdeSystem(state_dim=2, dynamics=AnalyticDynamics(_linear(matrix), 2), interval=Volterra(a=0.0))
    return GeneratorSystem(
        name="ode_spiral_2d", version=1, system=system, window=(0.0, 10.0), ic_low=0.5, ic_high=2.0, scale=None
    )


def decomp_curves_2d(scale: float = 0.5) -> GeneratorSystem:
    """
    Known split into local and memory parts.

    `f(t, y) = [[-0.1, -0.5], [0.5, -0.1]] y`, `K(t, s) = γ rot(t - s)`, `F = tanh`.
    """
    matrix = np.array([[-0.1, -0.5], [0.5, -0.1]])

    def kernel(t: FloatArray, s: FloatArray) -> FloatArray:
        lag = t - s
        rows = [[np.cos(lag), -np.sin(lag)], [np.sin(lag), np.cos(lag)]]
        return scale * np.moveaxis(np.array(rows), -1, 0)

    system = IdeSystem(
        state_dim=2,
        dynamics=AnalyticDynamics(_linear(matrix), 2),
        kernel=AnalyticKernel(kernel, 2, 2),
        integrand=AnalyticIntegrand(np.tanh, 2, 2),
        interval=Volterra(a=0.0),
    )
    return GeneratorSystem(
        name="decomp_curves_2d", version=1, system=system, window=(0.0, 5.0), ic_low=-1.0, ic_high=1.0, scale=scale
    )


def default_systems(scale: float | None = None) -> dict[str, GeneratorSystem]:
    """
    The versioned generator systems, by name.

    Parameters
    ----------
    scale : float, optional
        Kernel scale γ for every system with an integral term; each system's
        own default when omitted.
    """
    scaled = {} if scale is None else {"scale": scale}
    return {
        "ide_spiral_2d": ide_spiral_2d(**scaled),
        "ide_curves_4d": ide_curves_4d(**scaled),
        "ode_spiral_2d": ode_spiral_2d(),
        "decomp_curves_2d": decomp_curves_2d(**scaled),
    }


class GeneratedCurve(ArrayModel):
    trajectory: Trajectory
    residual: float
    truth: Decomposition | None = None
    self_intersections: int | None = None


class GeneratedDataset(ArrayModel):
    """Output of [`gen`][nide.gen]."""

    generator: GeneratorSystem
    spec: GeneratorSpec
    dataset: Dataset
    residuals: tuple[float, ...]
    truth: tuple[Decomposition, ...] = ()
    """Analytic decomposition per curve at the observation times (`decomp_curves_2d` only)."""
    self_intersections: tuple[int, ...] = ()
    """Segment crossings per curve (2-D systems only)."""
    manifest: Path | None = None


def generation_grid(points: int) -> int:
    """Smallest grid of at least 201 nodes on which `points` evenly spaced samples are nodes."""
    intervals = points - 1
    return intervals * math.ceil(200 / intervals) + 1


def gen(spec: GeneratorSpec, out: StrPath | None = None, *, jobs: int = 1) -> GeneratedDataset:
    """
    Generate a synthetic dataset by solving a versioned analytic IDE from random initial conditions.

    Curve `k` draws its initial state uniformly from the IC box using the `ic`
    sub-stream `k` of `spec.seed`, is solved on a grid that contains every output
    time as a node, is checked against the IDE residual and is then down-sampled
    to `points_per_curve` samples.

    Parameters
    ----------
    spec : GeneratorSpec
        What to generate.
    out : str or os.PathLike, optional
        Directory to write `curve_{k}.csv`, ground-truth files and `manifest.xml` into.
    jobs : int, optional
        Curves solved concurrently; the output does not depend on it.

    Raises
    ------
    GenerationError
        If a curve's residual exceeds `spec.residual_tolerance` or its solve fails.
    """
    generator = default_systems(spec.scale)[spec.name]
    system = generator.system
    t0, t1 = generator.window if spec.window is None else spec.window
    low = generator.ic_low if spec.ic_low is None else spec.ic_low
    high = generator.ic_high if spec.ic_high is None else spec.ic_high
    solver = SolverConfig(
        grid_size=generation_grid(spec.points_per_curve), max_iter=spec.max_iter, quadrature=spec.quadrature
    )
    stride = (solver.grid_size - 1) // (spec.points_per_curve - 1)
    logger.info(
        "generating %d curves of %s on [%s, %s] (grid %d)",
        spec.n_curves,
        generator.ident,
        format_float(t0),
        format_float(t1),
        solver.grid_size,
    )

    def curve(index: int) -> GeneratedCurve:
        y0 = substream(spec.seed, "ic", index).uniform(low, high, size=system.state_dim)
        try:
            with no_record():
                solution = solve_ivp(system, y0, t0, t1, solver)
        except SolverError as error:
            raise GenerationError(
                f"curve {index} failed to solve: {error}", seed=spec.seed, curve=index, residual=math.inf
            ) from error
        path = solution.y
        gap = residual(system, path, solver)
        if not gap <= spec.residual_tolerance:
            raise GenerationError(
                f"curve {index} has residual {gap:.3e} > {spec.residual_tolerance:.1e}",
                seed=spec.seed,
                curve=index,
                residual=gap,
            )
        times = np.array(path.times[::stride])
        states = np.array(path.numpy()[::stride])
        truth = None
        if spec.name == "decomp_curves_2d":
            grid = np.array(path.times)
            truth = Decomposition.from_rates(
                grid, local_term(system, path, grid), integral_term(system, path, grid, solver)
            ).at(times)
        crossings = count_self_intersections(path.numpy()) if system.state_dim == 2 else None
        logger.debug("curve %d: residual %.3e", index, gap)
        return GeneratedCurve(
            trajectory=Trajectory(times=times, states=states), residual=gap, truth=truth, self_intersections=crossings
        )

    curves = _map(curve, list(range(spec.n_curves)), jobs)
    provenance = {
        "system": generator.ident,
        "seed": str(spec.seed),
        "curves": str(spec.n_curves),
        "points": str(spec.points_per_curve),
        "window": f"{format_float(t0)},{format_float(t1)}",
        "ic_low": format_float(low),
        "ic_high": format_float(high),
        "scale": "none" if generator.scale is None else format_float(generator.scale),
        "quadrature": spec.quadrature.kind,
    }
    result = GeneratedDataset(
        generator=generator,
        spec=spec,
        dataset=Dataset(trajectories=tuple(item.trajectory for item in curves), provenance=provenance),
        residuals=tuple(item.residual for item in curves),
        truth=tuple(item.truth for item in curves if item.truth is not None),
        self_intersections=tuple(item.self_intersections for item in curves if item.self_intersections is not None),
    )
    if out is None:
        return result
    manifest = write_generated(result, out)
    logger.info("wrote %s", manifest)
    return result.model_copy(update={"manifest": manifest})

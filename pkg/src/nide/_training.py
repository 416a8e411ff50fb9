from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import TYPE_CHECKING, Callable, NamedTuple, TypeVar

import numpy as np
from natsort import natsorted
from pydantic import NonNegativeInt
from sklearn.metrics import r2_score

from nide._autodiff import no_record
from nide._exceptions import (
    DimensionError,
    NonFiniteError,
    SolverError,
    TrainingDivergedError,
    UndefinedMetricError,
)
from nide._gradients import compute_gradient, loss_value
from nide._models import (
    ArrayModel,
    Checkpoint,
    Dataset,
    LossSpec,
    MaskPolicy,
    Metrics,
    ModelConfig,
    ParentModel,
    SolverConfig,
    TimeNormalization,
    TrainConfig,
    Trajectory,
)
from nide._optim import Adam, CosineAnnealing
from nide._solver import IdeSystem, solve_ivp
from nide._utils import config_hash, substream

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from numpy.typing import ArrayLike

    from nide._types import FloatArray

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

Mask = tuple[bool, ...]


class EpochRecord(ParentModel):
    epoch: NonNegativeInt
    lr: float
    train_mse: float


class TrainResult(ArrayModel):
    checkpoint: Checkpoint
    history: tuple[EpochRecord, ...]
    masks: tuple[Mask | None, ...]
    """Hidden suffix of every (downsampled) training trajectory."""


class Prediction(ArrayModel):
    """A solved trajectory, in data time, with the solver's convergence report."""

    trajectory: Trajectory
    converged: bool
    iterations_used: NonNegativeInt
    observed_points: NonNegativeInt = 0
    """Leading points that were given; the rest are extrapolated."""


class ModelSummary(ParentModel):
    """Final training MSE of one model over several seeds."""

    name: str
    parameter_count: int
    seeds: tuple[int, ...]
    final_mse: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.final_mse))

    @property
    def std(self) -> float:
        return float(np.std(self.final_mse))


class _Member(NamedTuple):
    spec: LossSpec
    y0: FloatArray


def _map(fn: Callable[[T], R], items: Sequence[T], jobs: int) -> list[R]:
    """Ordered map, concurrent when `jobs > 1`."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def fit_normalization(dataset: Dataset) -> TimeNormalization:
    """The affine map sending the dataset's time window onto `[0, 1]`."""
    start, stop = dataset.window
    return TimeNormalization(offset=start, span=stop - start)


def downsample(trajectory: Trajectory, count: int | None) -> Trajectory:
    """Keep `count` evenly spaced samples, always including both ends."""
    if count is None or count >= trajectory.length:
        return trajectory
    keep = np.unique(np.round(np.linspace(0, trajectory.length - 1, max(count, 2))).astype(np.int64))
    return Trajectory(times=trajectory.times[keep], states=trajectory.states[keep])


def draw_mask(length: int, policy: MaskPolicy, index: int) -> Mask | None:
    """
    Hidden suffix for trajectory `index`.

    The suffix length is uniform over `{0, ..., ⌊max_fraction · T⌋}`, capped so that
    at least the first point stays visible.
    """
    if policy.kind == "none":
        return None
    limit = min(math.floor(policy.max_fraction * length), length - 1)
    hidden = int(substream(policy.seed, "mask", index).integers(0, limit + 1))
    return tuple([False] * (length - hidden) + [True] * hidden)


def checkpoint_system(checkpoint: Checkpoint) -> IdeSystem:
    """The trained system a checkpoint describes."""
    return IdeSystem.from_config(checkpoint.model, params=checkpoint.params)


def _prepare(
    dataset: Dataset, normalization: TimeNormalization, config: TrainConfig, policy: MaskPolicy
) -> tuple[list[_Member], tuple[Mask | None, ...]]:
    members = []
    masks = []
    for index, trajectory in enumerate(dataset.trajectories):
        sampled = downsample(trajectory, config.downsample_to)
        observed = Trajectory(times=normalization.to_model(sampled.times), states=sampled.states)
        mask = draw_mask(observed.length, policy, index)
        members.append(_Member(LossSpec(observed=observed, mask=mask), observed.initial_state))
        masks.append(mask)
    return members, tuple(masks)


def train(
    dataset: Dataset,
    template: ModelConfig,
    config: TrainConfig | None = None,
    mask_policy: MaskPolicy | None = None,
    solver: SolverConfig | None = None,
    *,
    jobs: int = 1,
) -> TrainResult:
    """
    Fit a system of the given template to a dataset.

    Every epoch visits the trajectories in a seeded permutation, in batches of
    `batch_size`. Each batch member is solved and differentiated independently
    (concurrently with `jobs > 1`); the batch loss and gradient are the means over
    members, reduced in member order, followed by one Adam step at the scheduled
    learning rate.

    Parameters
    ----------
    dataset : Dataset
        Training trajectories; times are mapped to `[0, 1]` first.
    template : ModelConfig
        Architecture; parameters are initialized from `config.seed`.
    config : TrainConfig, optional
        Optimizer, schedule, gradient mode and seeds.
    mask_policy : MaskPolicy, optional
        Hidden trailing points; masks are drawn once per trajectory.
    solver : SolverConfig, optional
        Solver settings for every forward solve.
    jobs : int, optional
        Worker threads; results do not depend on it.

    Returns
    -------
    TrainResult
        The final checkpoint, the per-epoch history and the masks used.

    Raises
    ------
    DimensionError
        If the template and the dataset disagree on the state dimension.
    TrainingDivergedError
        If an epoch yields a non-finite loss even after halving the learning rate.
    """
    config = TrainConfig() if config is None else config
    policy = MaskPolicy() if mask_policy is None else mask_policy
    solver = SolverConfig() if solver is None else solver
    if template.state_dim != dataset.state_dim:
        raise DimensionError(f"template has state dimension {template.state_dim}, data has {dataset.state_dim}")

    normalization = fit_normalization(dataset)
    members, masks = _prepare(dataset, normalization, config, policy)
    system = IdeSystem.from_config(template, seed=config.seed)
    values = np.array(system.params.values)
    adam = Adam(config.adam, values.shape[0])
    schedule = CosineAnnealing(config.schedule)
    digest = config_hash(template, solver)
    seeds = {"seed": config.seed, "mask": policy.seed}
    logger.info(
        "training %d parameters on %d trajectories for %d epochs (%s gradients)",
        values.shape[0],
        len(members),
        config.epochs,
        config.grad_mode.kind,
    )

    def member_gradient(args: tuple[IdeSystem, _Member]) -> tuple[float, FloatArray]:
        current, member = args
        try:
            value, grad = compute_gradient(current, member.y0, member.spec, solver, config.grad_mode)
        except (SolverError, NonFiniteError) as error:
            logger.debug("member failed: %s", error)
            return math.nan, np.full(current.params.size, math.nan)
        return value, np.array(grad.values)

    def run_epoch(start: FloatArray, epoch: int, lr: float) -> tuple[FloatArray, float]:
        order = substream(config.seed, "shuffle", epoch).permutation(len(members))
        params = start
        losses = []
        for first in range(0, len(order), config.batch_size):
            batch = [members[index] for index in order[first : first + config.batch_size]]
            current = system.with_params(params)
            results = _map(member_gradient, [(current, member) for member in batch], jobs)
            batch_losses = [value for value, _ in results]
            grad = np.mean([grad for _, grad in results], axis=0)
            if not (np.all(np.isfinite(batch_losses)) and np.all(np.isfinite(grad))):
                return params, math.nan
            losses.extend(batch_losses)
            logger.debug("epoch %d batch %d: mse %.6e", epoch, first // config.batch_size, np.mean(batch_losses))
            params = adam.step(params, grad, lr)
        return params, float(np.mean(losses))

    def snapshot(params: FloatArray, epoch: int, history: list[EpochRecord]) -> Checkpoint:
        return Checkpoint(
            model=template,
            solver=solver,
            params=system.params.with_values(params),
            normalization=normalization,
            epoch=epoch,
            history=tuple(record.train_mse for record in history),
            downsample_to=config.downsample_to,
            seeds=seeds,
            config_hash=digest,
        )

    history: list[EpochRecord] = []
    lr_factor = 1.0
    for epoch in range(config.epochs):
        saved = adam.snapshot()
        lr = schedule(epoch) * lr_factor
        updated, mse = run_epoch(values, epoch, lr)
        if not math.isfinite(mse):
            lr_factor *= 0.5
            lr = schedule(epoch) * lr_factor
            logger.warning("non-finite loss in epoch %d, retrying with learning rate %.3e", epoch, lr)
            adam.restore(saved)
            updated, mse = run_epoch(values, epoch, lr)
            if not math.isfinite(mse):
                raise TrainingDivergedError(
                    f"training diverged in epoch {epoch}", checkpoint=snapshot(values, epoch, history)
                )
        values = updated
        history.append(EpochRecord(epoch=epoch, lr=lr, train_mse=mse))
        logger.info("epoch %d: lr %.3e, train mse %.6e", epoch, lr, mse)

    final = system.with_params(values)
    final_losses = _map(lambda member: loss_value(final, member.y0, member.spec, solver), members, jobs)
    checkpoint = snapshot(values, config.epochs, history).model_copy(
        update={"final_mse": float(np.mean(final_losses))}
    )
    return TrainResult(checkpoint=checkpoint, history=tuple(history), masks=masks)


def predict(checkpoint: Checkpoint, y0: ArrayLike, times: ArrayLike) -> Prediction:
    """
    Solve the checkpointed system from `y0` at `times[0]` and sample it at `times` (data time).
    """
    stamps = np.asarray(times, dtype=np.float64)
    system = checkpoint_system(checkpoint)
    model_times = checkpoint.normalization.to_model(stamps)
    with no_record():
        solution = solve_ivp(system, y0, float(model_times[0]), float(model_times[-1]), checkpoint.solver)
        states = solution.y.sample_values(model_times)
    if not solution.converged:
        logger.warning("prediction solve did not converge")
    return Prediction(
        trajectory=Trajectory(times=stamps, states=states),
        converged=solution.converged,
        iterations_used=solution.iterations_used,
        observed_points=0,
    )


def predict_from_ic(
    checkpoint: Checkpoint, y0: ArrayLike, window: tuple[float, float], *, points: int = 20
) -> Prediction:
    """A single solve from an unseen initial condition, sampled at `points` evenly spaced times."""
    return predict(checkpoint, y0, np.linspace(window[0], window[1], points))


def extrapolate(checkpoint: Checkpoint, prefix: Trajectory, horizon: int) -> Prediction:
    """
    Continue a trajectory `horizon` steps past its end, at its mean sample spacing.

    The solve starts from the prefix's initial condition and covers the prefix
    and the extension; `observed_points` marks where the extension begins.
    """
    if horizon < 0:
        raise ValueError(f"horizon must be non-negative, got {horizon}")
    spacing = float(np.mean(np.diff(prefix.times)))
    future = prefix.t1 + spacing * np.arange(1, horizon + 1)
    prediction = predict(checkpoint, prefix.initial_state, np.concatenate([prefix.times, future]))
    return prediction.model_copy(update={"observed_points": prefix.length})


def _label_metrics(truth: FloatArray, predicted: FloatArray) -> tuple[float, float | None]:
    mse = float(np.mean((truth - predicted) ** 2))
    total = float(np.sum((truth - truth.mean(axis=0)) ** 2))
    if total == 0.0 or truth.shape[0] < 2:
        return mse, None
    return mse, float(r2_score(truth, predicted, multioutput="variance_weighted"))


def metrics_from_pairs(pairs: dict[str, tuple[list[FloatArray], list[FloatArray]]]) -> Metrics:
    """
    Pool `(truth, prediction)` rows per label into per-label and overall MSE/R².
    """
    if not pairs:
        raise UndefinedMetricError("no points to evaluate")
    labels = tuple(natsorted(pairs))
    mse, r2, counts = [], [], []
    for label in labels:
        truth, predicted = (np.array(rows) for rows in pairs[label])
        value, score = _label_metrics(truth, predicted)
        mse.append(value)
        r2.append(score)
        counts.append(truth.shape[0])
    truth = np.concatenate([np.array(pairs[label][0]) for label in labels])
    predicted = np.concatenate([np.array(pairs[label][1]) for label in labels])
    mse_total, r2_total = _label_metrics(truth, predicted)
    return Metrics(
        labels=labels, mse=tuple(mse), r2=tuple(r2), counts=tuple(counts), mse_total=mse_total, r2_total=r2_total
    )


def evaluate(
    checkpoint: Checkpoint,
    dataset: Dataset,
    masks: Sequence[Mask | None] | None = None,
    *,
    jobs: int = 1,
) -> Metrics:
    """
    Per-point MSE and R² of the checkpointed system on a dataset.

    Every trajectory is predicted from its initial state. Without masks every
    point is scored and labelled by its index; with masks only hidden points are
    scored, labelled by horizon `t+1`, `t+2`, ...

    R² is `1 - SSE/SST` with SST taken against the per-dimension mean of the
    ground truth over the scored points; it is `None` where SST is zero.

    Raises
    ------
    DimensionError
        If the dataset's dimension differs from the checkpoint's.
    UndefinedMetricError
        If no point is selected.
    """
    if checkpoint.model.state_dim != dataset.state_dim:
        raise DimensionError(
            f"checkpoint has state dimension {checkpoint.model.state_dim}, data has {dataset.state_dim}"
        )
    if masks is not None and len(masks) != len(dataset):
        raise DimensionError(f"{len(masks)} masks for {len(dataset)} trajectories")
    trajectories = dataset.trajectories
    predictions = _map(lambda item: predict(checkpoint, item.initial_state, item.times), trajectories, jobs)
    pairs: dict[str, tuple[list[FloatArray], list[FloatArray]]] = {}
    for index, (trajectory, prediction) in enumerate(zip(trajectories, predictions)):
        mask = None if masks is None else masks[index]
        if masks is None:
            selected: Iterable[tuple[str, int]] = ((str(point), point) for point in range(trajectory.length))
        elif mask is None:
            continue
        else:
            hidden = [point for point, flag in enumerate(mask) if flag]
            selected = ((f"t+{rank + 1}", point) for rank, point in enumerate(hidden))
        for label, point in selected:
            truth, predicted = pairs.setdefault(label, ([], []))
            truth.append(trajectory.states[point])
            predicted.append(prediction.trajectory.states[point])
    return metrics_from_pairs(pairs)


def _widths(base: tuple[int, ...], first: int) -> tuple[int, ...]:
    return tuple(max(1, round(first * width / base[0])) for width in base)


def make_node_baseline(template: ModelConfig, *, tolerance: float = 0.02) -> ModelConfig:
    """
    A neural-ODE template (`K ≡ 0`) whose local term matches the template's parameter count.

    The hidden layers of `f` are widened proportionally until the count is as
    close as possible to the template's. If no width lands within `tolerance`,
    the widest configuration below the budget is used and a warning logged.
    """
    target = template.parameter_count
    base = template.dynamics_hidden or (1,)

    def candidate(first: int) -> ModelConfig:
        fields = template.model_dump()
        fields.update(dynamics_hidden=_widths(base, first), kernel_hidden=None, integrand_hidden=None)
        return ModelConfig.model_validate(fields)

    best: ModelConfig | None = None
    below: ModelConfig | None = None
    first = 1
    while True:
        option = candidate(first)
        count = option.parameter_count
        if best is None or abs(count - target) < abs(best.parameter_count - target):
            best = option
        if count <= target:
            below = option
        if count > target:
            break
        first += 1
    if abs(best.parameter_count - target) <= tolerance * target:
        chosen = best
    else:
        chosen = below if below is not None else best
        logger.warning(
            "baseline has %d parameters for a budget of %d (more than %.0f%% apart)",
            chosen.parameter_count,
            target,
            tolerance * 100,
        )
    logger.info("baseline f%s: %d parameters (template %d)", chosen.dynamics_hidden, chosen.parameter_count, target)
    return chosen


def compare_models(
    dataset: Dataset,
    template: ModelConfig,
    config: TrainConfig | None = None,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    *,
    mask_policy: MaskPolicy | None = None,
    solver: SolverConfig | None = None,
    jobs: int = 1,
) -> tuple[ModelSummary, ModelSummary]:
    """
    Train the template and its parameter-matched neural ODE on the same data for every seed.

    Returns
    -------
    tuple[ModelSummary, ModelSummary]
        Summaries for `nide` and `node`, in that order.
    """
    config = TrainConfig() if config is None else config
    baseline = make_node_baseline(template)
    summaries = []
    for name, model in (("nide", template), ("node", baseline)):
        finals = []
        for seed in seeds:
            result = train(dataset, model, config.model_copy(update={"seed": seed}), mask_policy, solver, jobs=jobs)
            assert result.checkpoint.final_mse is not None
            finals.append(result.checkpoint.final_mse)
            logger.info("%s seed %d: final mse %.6e", name, seed, finals[-1])
        summaries.append(
            ModelSummary(name=name, parameter_count=model.parameter_count, seeds=tuple(seeds), final_mse=tuple(finals))
        )
    return summaries[0], summaries[1]

from __future__ import annotations

import logging
from typing import TYPE_CHECKING

import numpy as np
from pydantic import model_validator
from sklearn.decomposition import PCA
from sklearn.metrics import accuracy_score, pairwise_distances, r2_score

from nide._autodiff import Tensor, no_record
from nide._exceptions import DimensionError, UndefinedMetricError
from nide._models import ArrayModel, ParentModel, SolverConfig
from nide._numerics import cumulative_trapezoid
from nide._solver import IdeSystem, integral_term, local_term, solve_ivp
from nide._training import checkpoint_system, predict
from nide._types import ReadOnlyArray  # noqa: TC001

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import ArrayLike

    from nide._models import Checkpoint, Trajectory
    from nide._types import FloatArray

logger = logging.getLogger(__name__)


class Decomposition(ArrayModel):
    """
    Markovian (`f`) and non-Markovian (integral) parts of the dynamics along a solved path.

    Paths are displacements: each is the running trapezoid integral of its rate
    from zero, so `y(t) ≈ y0 + markovian_path + nonmarkovian_path`.
    """

    times: ReadOnlyArray
    markovian_rate: ReadOnlyArray
    nonmarkovian_rate: ReadOnlyArray
    markovian_path: ReadOnlyArray
    nonmarkovian_path: ReadOnlyArray
    converged: bool = True

    @model_validator(mode="after")
    def _check(self) -> Decomposition:
        shape = self.markovian_rate.shape
        if len(shape) != 2 or shape[0] != self.times.shape[0]:
            raise ValueError(f"rates must have shape (T, n) with T={self.times.shape[0]}, got {shape}")
        for series in (self.nonmarkovian_rate, self.markovian_path, self.nonmarkovian_path):
            if series.shape != shape:
                raise ValueError(f"all series must have shape {shape}, got {series.shape}")
        return self

    @classmethod
    def from_rates(
        cls, times: ArrayLike, markovian_rate: ArrayLike, nonmarkovian_rate: ArrayLike, *, converged: bool = True
    ) -> Decomposition:
        """Build a decomposition, integrating both rates into displacement paths."""
        stamps = np.asarray(times, dtype=np.float64)
        markov = np.asarray(markovian_rate, dtype=np.float64)
        nonmarkov = np.asarray(nonmarkovian_rate, dtype=np.float64)
        return cls(
            times=stamps,
            markovian_rate=markov,
            nonmarkovian_rate=nonmarkov,
            markovian_path=cumulative_trapezoid(markov, stamps),
            nonmarkovian_path=cumulative_trapezoid(nonmarkov, stamps),
            converged=converged,
        )

    @property
    def state_dim(self) -> int:
        return int(self.markovian_rate.shape[1])

    @property
    def total_rate(self) -> FloatArray:
        return self.markovian_rate + self.nonmarkovian_rate

    @property
    def total_path(self) -> FloatArray:
        return self.markovian_path + self.nonmarkovian_path

    def at(self, times: ArrayLike) -> Decomposition:
        """Every series linearly resampled at `times`."""
        stamps = np.asarray(times, dtype=np.float64)

        def resample(series: FloatArray) -> FloatArray:
            return np.stack([np.interp(stamps, self.times, column) for column in series.T], axis=1)

        return Decomposition(
            times=stamps,
            markovian_rate=resample(self.markovian_rate),
            nonmarkovian_rate=resample(self.nonmarkovian_rate),
            markovian_path=resample(self.markovian_path),
            nonmarkovian_path=resample(self.nonmarkovian_path),
            converged=self.converged,
        )


def decompose_system(
    system: IdeSystem, y0: ArrayLike, t0: float, t1: float, config: SolverConfig | None = None
) -> Decomposition:
    """
    Solve `system` and split its right-hand side at every grid node.
    """
    config = SolverConfig() if config is None else config
    with no_record():
        solution = solve_ivp(system, y0, t0, t1, config)
    path = solution.y
    times = np.array(path.times)
    markov = local_term(system, path, times)
    nonmarkov = integral_term(system, path, times, config)
    if not solution.converged:
        logger.warning("decomposition path did not converge")
    return Decomposition.from_rates(times, markov, nonmarkov, converged=solution.converged)


def decompose(checkpoint: Checkpoint, trajectory: Trajectory) -> Decomposition:
    """
    Decompose the checkpointed dynamics along the solve from `trajectory`'s initial state.

    Times and rates are reported in data time.
    """
    system = checkpoint_system(checkpoint)
    normalization = checkpoint.normalization
    start, stop = normalization.to_model(np.array([trajectory.t0, trajectory.t1]))
    parts = decompose_system(system, trajectory.initial_state, float(start), float(stop), checkpoint.solver)
    return Decomposition.from_rates(
        normalization.to_data(parts.times),
        parts.markovian_rate / normalization.span,
        parts.nonmarkovian_rate / normalization.span,
        converged=parts.converged,
    )


class DecompositionScores(ParentModel):
    """R² of learned components against ground truth, pooled over curves; `None` where undefined."""

    rate_total: float | None
    rate_markovian: float | None
    rate_nonmarkovian: float | None
    path_total: float | None
    path_markovian: float | None
    path_nonmarkovian: float | None


def _pooled_r2(truth: list[FloatArray], predicted: list[FloatArray]) -> float | None:
    expected = np.concatenate(truth)
    estimate = np.concatenate(predicted)
    if expected.shape[0] < 2 or float(np.sum((expected - expected.mean(axis=0)) ** 2)) == 0.0:
        return None
    return float(r2_score(expected, estimate, multioutput="variance_weighted"))


def compare_decompositions(learned: Sequence[Decomposition], truth: Sequence[Decomposition]) -> DecompositionScores:
    """
    Score learned decompositions against ground truth, curve by curve, pooled.

    Each learned decomposition is resampled at its ground truth's times first.
    """
    if len(learned) != len(truth) or not truth:
        raise DimensionError(f"{len(learned)} learned decompositions for {len(truth)} ground truths")
    aligned = [item.at(reference.times) for item, reference in zip(learned, truth)]
    scores = {}
    for name, getter in (
        ("rate_total", lambda item: item.total_rate),
        ("rate_markovian", lambda item: item.markovian_rate),
        ("rate_nonmarkovian", lambda item: item.nonmarkovian_rate),
        ("path_total", lambda item: item.total_path),
        ("path_markovian", lambda item: item.markovian_path),
        ("path_nonmarkovian", lambda item: item.nonmarkovian_path),
    ):
        scores[name] = _pooled_r2([getter(item) for item in truth], [getter(item) for item in aligned])
    return DecompositionScores(**scores)


class Embedding(ArrayModel):
    """Latent trajectory `F(y(t))`."""

    times: ReadOnlyArray
    points: ReadOnlyArray


def embed(checkpoint: Checkpoint, trajectory: Trajectory, *, solved: bool = True) -> Embedding:
    """
    Map a trajectory into the integrand's latent space.

    Parameters
    ----------
    checkpoint : Checkpoint
        Must contain an integrand network.
    trajectory : Trajectory
        Observed data.
    solved : bool, optional
        Embed the states solved from the trajectory's initial condition (default)
        rather than the observed states.

    Raises
    ------
    DimensionError
        If the checkpoint has no integrand or dimensions differ.
    """
    system = checkpoint_system(checkpoint)
    if system.integrand is None:
        raise DimensionError("checkpoint has no integrand to embed with")
    if trajectory.state_dim != system.state_dim:
        raise DimensionError(f"trajectory dimension {trajectory.state_dim} != system dimension {system.state_dim}")
    states = predict(checkpoint, trajectory.initial_state, trajectory.times).trajectory.states if solved else None
    with no_record():
        integrand = system.bind().integrand
        assert integrand is not None
        points = integrand(Tensor(trajectory.states if states is None else states)).data
    return Embedding(times=trajectory.times, points=points)


def _neighbours(points: ArrayLike, k: int) -> FloatArray:
    data = np.asarray(points, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if k < 1 or data.shape[0] < k + 1:
        raise UndefinedMetricError(f"k-NN with k={k} needs at least {k + 1} points, got {data.shape[0]}")
    distances = pairwise_distances(data, metric="euclidean")
    np.fill_diagonal(distances, np.inf)
    return np.argsort(distances, axis=1, kind="stable")[:, :k]


def knn_regress(points: ArrayLike, targets: ArrayLike, k: int = 3) -> float:
    """
    Leave-one-out k-NN regression score.

    Each point is predicted as the mean target of its `k` nearest other points
    (Euclidean; ties go to the lower index).

    Returns
    -------
    float
        R² of the predictions.

    Raises
    ------
    UndefinedMetricError
        If there are fewer than `k + 1` points or the targets are constant.
    """
    values = np.asarray(targets, dtype=np.float64)
    order = _neighbours(points, k)
    if np.all(values == values.reshape(-1)[0]):
        raise UndefinedMetricError("targets have zero variance, R² is undefined")
    return float(r2_score(values, values[order].mean(axis=1)))


def knn_classify(points: ArrayLike, labels: ArrayLike, k: int = 3) -> float:
    """
    Leave-one-out k-NN classification accuracy.

    Majority vote among the `k` nearest other points; a tied vote goes to the
    tied label whose member is nearest.
    """
    classes = np.asarray(labels)
    order = _neighbours(points, k)
    predicted = []
    for row in order:
        votes = classes[row]
        values, counts = np.unique(votes, return_counts=True)
        tied = set(values[counts == counts.max()].tolist())
        predicted.append(next(label for label in votes.tolist() if label in tied))
    return float(accuracy_score(classes, np.asarray(predicted, dtype=classes.dtype)))


class Projection(ArrayModel):
    """A PCA projection with a deterministic sign convention."""

    points: ReadOnlyArray
    components: ReadOnlyArray
    """Principal directions, `(dims, n)`; each has its largest-magnitude loading positive."""
    mean: ReadOnlyArray
    explained_variance_ratio: ReadOnlyArray

    def reconstruct(self) -> FloatArray:
        return self.points @ self.components + self.mean


def pca_project(states: ArrayLike, dims: int) -> Projection:
    """
    Project mean-centred states onto their top `dims` principal directions.

    Raises
    ------
    DimensionError
        If there are not more samples than `dims`, or `dims` exceeds the state width.
    """
    data = np.asarray(states, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] <= dims or not 1 <= dims <= data.shape[1]:
        raise DimensionError(f"cannot project {data.shape} onto {dims} components")
    pca = PCA(n_components=dims, svd_solver="full").fit(data)
    components = np.array(pca.components_)
    rank = int(np.linalg.matrix_rank(data - pca.mean_))
    if rank < dims:
        logger.warning("states have rank %d, fewer than the %d requested components", rank, dims)
    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(dims), pivots])
    signs[signs == 0] = 1.0
    components *= signs[:, None]
    return Projection(
        points=(data - pca.mean_) @ components.T,
        components=components,
        mean=pca.mean_,
        explained_variance_ratio=pca.explained_variance_ratio_,
    )


def count_self_intersections(points: ArrayLike) -> int:
    """
    Number of crossings between non-adjacent segments of a 2-D polyline.
    """
    path = np.asarray(points, dtype=np.float64)
    if path.ndim != 2 or path.shape[1] != 2:
        raise DimensionError(f"self-intersections need a (T, 2) path, got {path.shape}")
    starts, ends = path[:-1], path[1:]
    count = 0

    def orientation(a: FloatArray, b: FloatArray, c: FloatArray) -> FloatArray:
        cross = (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])
        return np.sign(cross)

    for index in range(starts.shape[0] - 2):
        p, q = starts[index], ends[index]
        r, s = starts[index + 2 :], ends[index + 2 :]
        crosses = (orientation(p, q, r) * orientation(p, q, s) < 0) & (orientation(r, s, p) * orientation(r, s, q) < 0)
        count += int(np.count_nonzero(crosses))
    return count

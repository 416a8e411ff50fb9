from __future__ import annotations

from functools import lru_cache
from typing import TYPE_CHECKING, Callable

import numpy as np
from numpy.polynomial.legendre import leggauss

from nide._autodiff import Tensor, concat, matmul, reshape, scale, take, weighted_sum
from nide._exceptions import DimensionError
from nide._utils import substream

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from nide._models import QuadratureRule
    from nide._types import FloatArray, IntArray

KernelFn = Callable[["FloatArray", "FloatArray"], Tensor]
IntegrandFn = Callable[[Tensor], Tensor]


@lru_cache(maxsize=None)
def _reference_rule(count: int) -> tuple[FloatArray, FloatArray]:
    nodes, weights = leggauss(count)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def batch_nodes_and_weights(
    rule: QuadratureRule, lower: ArrayLike, upper: ArrayLike, *, call: int = 0
) -> tuple[FloatArray, FloatArray]:
    """
    Quadrature nodes and weights for many intervals at once.

    Parameters
    ----------
    rule : QuadratureRule
        Gauss–Legendre or Monte-Carlo.
    lower, upper : array_like
        Interval limits, shape `(T,)`, with `lower <= upper`.
    call : int, optional
        Call index selecting the Monte-Carlo draw.

    Returns
    -------
    tuple[numpy.ndarray, numpy.ndarray]
        Nodes and weights, both `(T, Q)`. Degenerate intervals get zero weights.

    Raises
    ------
    ValueError
        If some `lower > upper`.
    """
    a = np.atleast_1d(np.asarray(lower, dtype=np.float64))
    b = np.atleast_1d(np.asarray(upper, dtype=np.float64))
    if np.any(a > b):
        raise ValueError("integration limits must satisfy a <= b")
    width = (b - a)[:, None]
    if rule.kind == "gauss_legendre":
        reference, reference_weights = _reference_rule(rule.node_count)
        nodes = a[:, None] + width * (reference[None, :] + 1.0) / 2.0
        weights = width * reference_weights[None, :] / 2.0
    else:
        draws = substream(rule.seed, "quadrature", call).random((a.shape[0], rule.sample_count))
        nodes = a[:, None] + width * draws
        weights = np.broadcast_to(width / rule.sample_count, nodes.shape).copy()
    return nodes, weights


def nodes_and_weights(rule: QuadratureRule, a: float, b: float, *, call: int = 0) -> tuple[FloatArray, FloatArray]:
    """
    Quadrature nodes and weights on `[a, b]`.

    Weights always sum to `b - a`. Gauss–Legendre nodes are mapped affinely from
    `[-1, 1]`; Monte-Carlo nodes are uniform draws, deterministic per
    `(rule.seed, call)`, with weights `(b - a) / N`.

    Returns
    -------
    tuple[numpy.ndarray, numpy.ndarray]
        Nodes and weights; both empty when `a == b`.

    Raises
    ------
    ValueError
        If `a > b`.
    """
    if a > b:
        raise ValueError(f"integration limits must satisfy a <= b, got [{a}, {b}]")
    if a == b:
        return np.zeros(0), np.zeros(0)
    nodes, weights = batch_nodes_and_weights(rule, [a], [b], call=call)
    return nodes[0], weights[0]


def integrate(fn: Callable[[float], Tensor], rule: QuadratureRule, a: float, b: float, *, call: int = 0) -> Tensor:
    """
    `∫ₐᵇ fn(s) ds` as a weighted sum of `fn` at the quadrature nodes.

    Every evaluation of `fn` goes through the active tape, so gradients flow into
    whatever `fn` closes over. An empty interval yields zeros shaped like `fn(a)`.
    """
    nodes, weights = nodes_and_weights(rule, a, b, call=call)
    if nodes.size == 0:
        return scale(fn(a), 0.0)
    return weighted_sum(weights, [fn(float(node)) for node in nodes])


def interpolation_weights(grid: FloatArray, times: ArrayLike) -> tuple[IntArray, FloatArray]:
    """
    Left node index and two barycentric weights for every query time.

    Times outside the grid are clamped to its ends. At a grid node the weights
    are exactly `(1, 0)` (or `(0, 1)` at the last node).
    """
    queries = np.clip(np.atleast_1d(np.asarray(times, dtype=np.float64)), grid[0], grid[-1])
    index = np.clip(np.searchsorted(grid, queries, side="right") - 1, 0, grid.shape[0] - 2).astype(np.int64)
    left = grid[index]
    right = grid[index + 1]
    upper = (queries - left) / (right - left)
    upper = np.where(queries == left, 0.0, np.where(queries == right, 1.0, upper))
    return index, np.stack([1.0 - upper, upper], axis=1)


def hermite_weights(grid: FloatArray, times: ArrayLike) -> tuple[IntArray, FloatArray]:
    """
    Left node index and the cubic Hermite weights of `(y_i, y_{i+1}, y'_i, y'_{i+1})`.

    The derivative weights already carry the interval width. At a grid node the
    weights are exactly `(1, 0, 0, 0)` (or `(0, 1, 0, 0)` at the last node).
    """
    index, linear = interpolation_weights(grid, times)
    u = linear[:, 1]
    width = grid[index + 1] - grid[index]
    square = u * u
    cube = square * u
    weights = np.stack(
        [
            2.0 * cube - 3.0 * square + 1.0,
            -2.0 * cube + 3.0 * square,
            width * (cube - 2.0 * square + u),
            width * (cube - square),
        ],
        axis=1,
    )
    return index, weights


def gather_weights(index: IntArray, weights: FloatArray) -> tuple[IntArray, Tensor]:
    """
    Turn interpolation weights into a row gather plus a stacked `(P, 1, 2)` weight tensor.
    """
    rows = np.stack([index, index + 1], axis=1).reshape(-1)
    return rows, Tensor(weights.reshape(-1, 1, 2))


class GridFunction:
    """
    A path stored on a uniform grid and evaluated by piecewise-linear interpolation.

    Parameters
    ----------
    t0, t1 : float
        Grid end points, `t0 < t1`.
    values : Tensor or array_like
        Values at the `grid_size` nodes, shape `(grid_size, n)`.
    rates : Tensor or array_like, optional
        Time derivative at the nodes, same shape as `values`. The solver keeps
        them so that integral terms can read the path by cubic Hermite
        interpolation; `eval` and `sample` stay piecewise-linear.
    """

    __slots__ = ("t0", "t1", "values", "rates", "_grid")

    def __init__(
        self, t0: float, t1: float, values: Tensor | ArrayLike, rates: Tensor | ArrayLike | None = None
    ) -> None:
        self.values = values if isinstance(values, Tensor) else Tensor(values)
        if self.values.ndim != 2 or self.values.shape[0] < 2:
            raise DimensionError(f"grid values must have shape (grid_size >= 2, n), got {self.values.shape}")
        self.rates = rates if rates is None or isinstance(rates, Tensor) else Tensor(rates)
        if self.rates is not None and self.rates.shape != self.values.shape:
            raise DimensionError(f"grid rates have shape {self.rates.shape}, values {self.values.shape}")
        if not t0 < t1:
            raise DimensionError(f"grid needs t0 < t1, got [{t0}, {t1}]")
        self.t0 = float(t0)
        self.t1 = float(t1)
        self._grid = np.linspace(self.t0, self.t1, self.values.shape[0])

    def __repr__(self) -> str:
        return f"GridFunction(t0={self.t0}, t1={self.t1}, grid_size={self.grid_size}, n={self.state_dim})"

    @property
    def grid_size(self) -> int:
        return self.values.shape[0]

    @property
    def state_dim(self) -> int:
        return self.values.shape[1]

    @property
    def step(self) -> float:
        """Grid spacing `h`."""
        return (self.t1 - self.t0) / (self.grid_size - 1)

    @property
    def times(self) -> FloatArray:
        """Grid node times, a read-only view."""
        view = self._grid.view()
        view.setflags(write=False)
        return view

    def numpy(self) -> FloatArray:
        return self.values.numpy()

    def eval_weights(self, t: float) -> tuple[int, tuple[float, float]]:
        """Left node index and the weights of the left and right node at `t`."""
        index, weights = interpolation_weights(self._grid, [t])
        return int(index[0]), (float(weights[0, 0]), float(weights[0, 1]))

    def eval(self, t: float) -> Tensor:
        """
        Value at `t`, `(n,)`; a stored node value is returned bit-exactly.
        """
        index, (left, right) = self.eval_weights(t)
        if right == 0.0:
            return take(self.values, index)
        if left == 0.0:
            return take(self.values, index + 1)
        return weighted_sum([left, right], [take(self.values, index), take(self.values, index + 1)])

    def sample(self, times: ArrayLike) -> Tensor:
        """
        Values at many times, `(P, n)`, as one gather and one stacked product.
        """
        index, weights = interpolation_weights(self._grid, times)
        rows, stacked = gather_weights(index, weights)
        pairs = reshape(take(self.values, rows), (index.shape[0], 2, self.state_dim))
        return reshape(matmul(stacked, pairs), (index.shape[0], self.state_dim))

    def sample_values(self, times: ArrayLike) -> FloatArray:
        """Plain numpy evaluation at many times, no recording."""
        index, weights = interpolation_weights(self._grid, times)
        data = self.values.data
        return weights[:, :1] * data[index] + weights[:, 1:] * data[index + 1]


class IntegralPlan:
    """
    Everything about `∫_{α(t)}^{β(t)} K(t, s) F(y(s)) ds` that does not depend on `y`.

    For a fixed set of evaluation times the quadrature nodes and weights, the
    kernel inputs `(t, s)` and the interpolation of `y` at every node `s` are
    computed once; evaluating the integral for a new iterate is then a gather, one
    pass of `F`, and two stacked matrix products.

    Given node rates, `y(s)` is read by cubic Hermite interpolation, which keeps
    the integral term fourth-order accurate in the grid step; otherwise it is
    read piecewise-linearly.

    Parameters
    ----------
    times : array_like
        Evaluation times `t`, shape `(T,)`.
    lower, upper : array_like
        `α(t)` and `β(t)` for every evaluation time.
    rule : QuadratureRule
        Quadrature for the inner integral.
    grid : numpy.ndarray
        Node times of the grid the iterate lives on.
    call : int, optional
        Monte-Carlo call index.
    """

    def __init__(
        self,
        times: ArrayLike,
        lower: ArrayLike,
        upper: ArrayLike,
        rule: QuadratureRule,
        grid: FloatArray,
        *,
        call: int = 0,
    ) -> None:
        self.times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        self.nodes, self.weights = batch_nodes_and_weights(rule, lower, upper, call=call)
        count, points = self.nodes.shape
        self.count = count
        self.points = points
        self.kernel_t = np.repeat(self.times, points)
        self.kernel_s = self.nodes.reshape(-1)
        index, weights = interpolation_weights(grid, self.kernel_s)
        self._rows, self._stacked = gather_weights(index, weights)
        _, cubic = hermite_weights(grid, self.kernel_s)
        size = grid.shape[0]
        self._grid_size = size
        self._hermite_rows = np.stack([index, index + 1, index + size, index + size + 1], axis=1).reshape(-1)
        self._hermite = Tensor(cubic.reshape(-1, 1, 4))
        self._quadrature = Tensor(self.weights.reshape(count, 1, points))

    def kernel_values(self, kernel: KernelFn) -> Tensor:
        """`K(t, s)` at every `(time, node)` pair, `(T·Q, n, m)`."""
        return kernel(self.kernel_t, self.kernel_s)

    def integrand_values(self, integrand: IntegrandFn, values: Tensor, rates: Tensor | None = None) -> Tensor:
        """`F(y(s))` at every node, `(T·Q, m)`, with `y` interpolated from grid `values` (and `rates`)."""
        width = values.shape[1]
        total = self.count * self.points
        if rates is None:
            pairs = reshape(take(values, self._rows), (total, 2, width))
            states = reshape(matmul(self._stacked, pairs), (total, width))
        else:
            if values.shape[0] != self._grid_size or rates.shape != values.shape:
                raise DimensionError(f"plan grid has {self._grid_size} nodes, got {values.shape} and {rates.shape}")
            quads = reshape(take(concat([values, rates], axis=0), self._hermite_rows), (total, 4, width))
            states = reshape(matmul(self._hermite, quads), (total, width))
        return integrand(states)

    def evaluate(
        self, kernel_values: Tensor, integrand: IntegrandFn, values: Tensor, rates: Tensor | None = None
    ) -> Tensor:
        """
        The integral term at every evaluation time, `(T, n)`.

        Parameters
        ----------
        kernel_values : Tensor
            Output of [`kernel_values`][nide._numerics.IntegralPlan.kernel_values].
        integrand : Callable
            `F`, mapping `(P, n)` states to `(P, m)`.
        values : Tensor
            Grid values of the frozen iterate, `(grid_size, n)`.
        rates : Tensor, optional
            Its time derivative at the grid nodes.
        """
        latent = self.integrand_values(integrand, values, rates)
        rows, n, m = kernel_values.shape
        products = matmul(kernel_values, reshape(latent, (rows, m, 1)))
        products = reshape(products, (self.count, self.points, n))
        return reshape(matmul(self._quadrature, products), (self.count, n))


def cumulative_trapezoid(values: ArrayLike, times: ArrayLike) -> FloatArray:
    """
    Running trapezoid integral of `values (T, n)` over `times (T,)`, starting at zero.
    """
    data = np.asarray(values, dtype=np.float64)
    stamps = np.asarray(times, dtype=np.float64)
    increments = 0.5 * (data[1:] + data[:-1]) * np.diff(stamps)[:, None]
    return np.concatenate([np.zeros((1, data.shape[1])), np.cumsum(increments, axis=0)])

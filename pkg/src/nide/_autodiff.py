"""
Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable computation in the package is a sequence of the primitives
in [`Primitive`][nide._autodiff.Primitive]. While a [`Tape`][nide._autodiff.Tape]
is active (`with Tape() as tape: ...`), each primitive application is appended to
it; [`backward`][nide._autodiff.backward] then walks the tape once in reverse.
Outside a tape the same functions simply compute values.

```py
with Tape() as tape:
    x = Tensor([1.0, 2.0, 3.0])
    y = reduce_sum(tanh(x))
grads = backward(tape, y)
grads.wrt(x)  # 1 - tanh(x)**2
```
"""

from __future__ import annotations

import enum
from contextlib import contextmanager
from contextvars import ContextVar, Token
from typing import TYPE_CHECKING, Any, Callable, NamedTuple, Union

import numpy as np

from nide._exceptions import NonFiniteError, ShapeError, TapeError

if TYPE_CHECKING:
    from collections.abc import Iterator, Sequence

    from numpy.typing import ArrayLike
    from typing_extensions import Self

    from nide._types import FloatArray

Index = Union[slice, int, "np.ndarray[Any, np.dtype[np.int64]]"]
"""Index expression along the leading axis accepted by the `slice` primitive."""


class Primitive(str, enum.Enum):
    """The closed set of recordable operations."""

    MATMUL = "matmul"
    ADD = "add"
    SCALE = "scale"
    TANH = "elementwise_tanh"
    COSH = "elementwise_cosh"
    SINH = "elementwise_sinh"
    SUM = "sum"
    WEIGHTED_SUM = "weighted_sum"
    RESHAPE = "reshape"
    CONCAT = "concat"
    SLICE = "slice"


class Tensor:
    """
    A dense float64 array, optionally produced by a recorded primitive.

    Tensors created directly are leaves; tensors returned by primitives while a
    tape is active carry the node that produced them.
    """

    __slots__ = ("data", "node")

    def __init__(self, data: ArrayLike) -> None:
        self.data: FloatArray = np.array(data, dtype=np.float64)
        self.node: Node | None = None

    @classmethod
    def _wrap(cls, data: FloatArray, node: Node | None = None) -> Tensor:
        tensor = cls.__new__(cls)
        tensor.data = data
        tensor.node = node
        return tensor

    @property
    def shape(self) -> tuple[int, ...]:
        """Extents of the tensor."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Number of axes."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """Number of entries."""
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        """`True` if the tensor was not produced by a recorded primitive."""
        return self.node is None

    def item(self) -> float:
        """The single value of a one-element tensor."""
        if self.data.size != 1:
            raise ShapeError("item", (self.shape,), "tensor must hold exactly one value")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> FloatArray:
        """Read-only view of the underlying array."""
        view = self.data.view()
        view.setflags(write=False)
        return view

    def __repr__(self) -> str:
        origin = "leaf" if self.node is None else self.node.primitive.value
        return f"Tensor(shape={self.shape}, {origin})"


class Node:
    """One recorded primitive application."""

    __slots__ = ("primitive", "inputs", "output", "attrs", "aux", "tape", "index")

    def __init__(
        self,
        primitive: Primitive,
        inputs: tuple[Tensor, ...],
        output: Tensor,
        attrs: dict[str, Any],
        aux: Any,
        tape: Tape,
        index: int,
    ) -> None:
        self.primitive = primitive
        self.inputs = inputs
        self.output = output
        self.attrs = attrs
        self.aux = aux
        self.tape = tape
        self.index = index


_ACTIVE: ContextVar[Tape | None] = ContextVar("nide_active_tape", default=None)


class Tape:
    """
    Append-only record of primitive applications.

    A tape is confined to the thread (context) that activated it. Nodes are only
    ever appended, so every node's operands precede it.

    Parameters
    ----------
    strict : bool, optional
        Raise [`NonFiniteError`][nide.NonFiniteError] as soon as a primitive
        sees or produces a NaN or Inf.
    """

    def __init__(self, *, strict: bool = False) -> None:
        self.nodes: list[Node] = []
        self.strict = strict
        self._tokens: list[Token[Tape | None]] = []

    def __enter__(self) -> Self:
        self._tokens.append(_ACTIVE.set(self))
        return self

    def __exit__(self, *exc: object) -> None:
        _ACTIVE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Node]:
        return iter(self.nodes)


@contextmanager
def no_record() -> Iterator[None]:
    """Evaluate primitives without recording, even inside an active tape."""
    token = _ACTIVE.set(None)
    try:
        yield
    finally:
        _ACTIVE.reset(token)


Forward = Callable[[tuple["FloatArray", ...], dict[str, Any]], tuple["FloatArray", Any]]
Pullback = Callable[
    ["FloatArray", tuple["FloatArray", ...], "FloatArray", Any, dict[str, Any]], tuple["FloatArray | None", ...]
]
Check = Callable[[tuple["FloatArray", ...], dict[str, Any]], None]


class Rule(NamedTuple):
    check: Check
    forward: Forward
    pullback: Pullback


def _shapes(arrays: tuple[FloatArray, ...]) -> tuple[tuple[int, ...], ...]:
    return tuple(array.shape for array in arrays)


# matmul


def _check_matmul(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> None:
    a, b = arrays
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError("matmul", _shapes(arrays), "operands must both be matrices or both be stacks of matrices")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", _shapes(arrays), "stack extents differ")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", _shapes(arrays), "inner extents differ")


def _forward_matmul(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> tuple[FloatArray, Any]:
    a, b = arrays
    return np.matmul(a, b), None


def _pullback_matmul(
    g: FloatArray, arrays: tuple[FloatArray, ...], out: FloatArray, aux: Any, attrs: dict[str, Any]
) -> tuple[FloatArray | None, ...]:
    a, b = arrays
    return np.matmul(g, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), g)


# add / scale


def _check_add(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> None:
    a, b = arrays
    if a.shape != b.shape:
        raise ShapeError("add", _shapes(arrays), "shapes must be identical")


def _forward_add(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> tuple[FloatArray, Any]:
    a, b = arrays
    return a + b, None


def _pullback_add(
    g: FloatArray, arrays: tuple[FloatArray, ...], out: FloatArray, aux: Any, attrs: dict[str, Any]
) -> tuple[FloatArray | None, ...]:
    return g, g


def _check_unary(name: str) -> Check:
    def check(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> None:
        if len(arrays) != 1:
            raise ShapeError(name, _shapes(arrays), "expects exactly one operand")

    return check


def _forward_scale(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> tuple[FloatArray, Any]:
    return attrs["factor"] * arrays[0], None


def _pullback_scale(
    g: FloatArray, arrays: tuple[FloatArray, ...], out: FloatArray, aux: Any, attrs: dict[str, Any]
) -> tuple[FloatArray | None, ...]:
    return (attrs["factor"] * g,)


# elementwise


def _forward_tanh(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> tuple[FloatArray, Any]:
    return np.tanh(arrays[0]), None


def _pullback_tanh(
    g: FloatArray, arrays: tuple[FloatArray, ...], out: FloatArray, aux: Any, attrs: dict[str, Any]
) -> tuple[FloatArray | None, ...]:
    return (g * (1.0 - out * out),)


def _forward_cosh(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> tuple[FloatArray, Any]:
    return np.cosh(arrays[0]), None


def _pullback_cosh(
    g: FloatArray, arrays: tuple[FloatArray, ...], out: FloatArray, aux: Any, attrs: dict[str, Any]
) -> tuple[FloatArray | None, ...]:
    return (g * np.sinh(arrays[0]),)


def _forward_sinh(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> tuple[FloatArray, Any]:
    return np.sinh(arrays[0]), None


def _pullback_sinh(
    g: FloatArray, arrays: tuple[FloatArray, ...], out: FloatArray, aux: Any, attrs: dict[str, Any]
) -> tuple[FloatArray | None, ...]:
    return (g * np.cosh(arrays[0]),)


# reductions


def _forward_sum(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> tuple[FloatArray, Any]:
    return np.asarray(np.sum(arrays[0]), dtype=np.float64), None


def _pullback_sum(
    g: FloatArray, arrays: tuple[FloatArray, ...], out: FloatArray, aux: Any, attrs: dict[str, Any]
) -> tuple[FloatArray | None, ...]:
    return (np.full(arrays[0].shape, float(g), dtype=np.float64),)


def _check_weighted_sum(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> None:
    weights = attrs["weights"]
    if len(arrays) == 0 or len(weights) != len(arrays):
        raise ShapeError("weighted_sum", _shapes(arrays), f"{len(weights)} weights for {len(arrays)} operands")
    if any(array.shape != arrays[0].shape for array in arrays):
        raise ShapeError("weighted_sum", _shapes(arrays), "shapes must be identical")


def _forward_weighted_sum(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> tuple[FloatArray, Any]:
    weights = attrs["weights"]
    out = weights[0] * arrays[0]
    for weight, array in zip(weights[1:], arrays[1:]):
        out = out + weight * array
    return out, None


def _pullback_weighted_sum(
    g: FloatArray, arrays: tuple[FloatArray, ...], out: FloatArray, aux: Any, attrs: dict[str, Any]
) -> tuple[FloatArray | None, ...]:
    return tuple(weight * g for weight in attrs["weights"])


# structural


def _check_reshape(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> None:
    shape = attrs["shape"]
    if int(np.prod(shape, dtype=np.int64)) != arrays[0].size or any(extent < 0 for extent in shape):
        raise ShapeError("reshape", _shapes(arrays), f"cannot reshape into {shape}")


def _forward_reshape(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> tuple[FloatArray, Any]:
    return arrays[0].reshape(attrs["shape"]), None


def _pullback_reshape(
    g: FloatArray, arrays: tuple[FloatArray, ...], out: FloatArray, aux: Any, attrs: dict[str, Any]
) -> tuple[FloatArray | None, ...]:
    return (g.reshape(arrays[0].shape),)


def _check_concat(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> None:
    axis = attrs["axis"]
    if len(arrays) == 0:
        raise ShapeError("concat", (), "needs at least one operand")
    ndim = arrays[0].ndim
    if not 0 <= axis < ndim or any(array.ndim != ndim for array in arrays):
        raise ShapeError("concat", _shapes(arrays), f"axis {axis} invalid or ranks differ")
    reference = arrays[0].shape[:axis] + arrays[0].shape[axis + 1 :]
    if any(array.shape[:axis] + array.shape[axis + 1 :] != reference for array in arrays):
        raise ShapeError("concat", _shapes(arrays), f"extents differ off axis {axis}")


def _forward_concat(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> tuple[FloatArray, Any]:
    axis = attrs["axis"]
    splits = np.cumsum([array.shape[axis] for array in arrays])[:-1]
    return np.concatenate(arrays, axis=axis), splits


def _pullback_concat(
    g: FloatArray, arrays: tuple[FloatArray, ...], out: FloatArray, aux: Any, attrs: dict[str, Any]
) -> tuple[FloatArray | None, ...]:
    return tuple(np.split(g, aux, axis=attrs["axis"]))


def _check_slice(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> None:
    array = arrays[0]
    key = attrs["key"]
    if array.ndim == 0:
        raise ShapeError("slice", _shapes(arrays), "cannot index a scalar")
    if isinstance(key, np.ndarray):
        if key.dtype.kind not in "iu":
            raise ShapeError("slice", _shapes(arrays), "index arrays must be integer")
        if key.size and (key.min() < 0 or key.max() >= array.shape[0]):
            raise ShapeError("slice", _shapes(arrays), "index out of range")
    elif isinstance(key, (int, np.integer)) and not -array.shape[0] <= key < array.shape[0]:
        raise ShapeError("slice", _shapes(arrays), f"index {key} out of range")


def _forward_slice(arrays: tuple[FloatArray, ...], attrs: dict[str, Any]) -> tuple[FloatArray, Any]:
    return np.array(arrays[0][attrs["key"]], dtype=np.float64), None


def _pullback_slice(
    g: FloatArray, arrays: tuple[FloatArray, ...], out: FloatArray, aux: Any, attrs: dict[str, Any]
) -> tuple[FloatArray | None, ...]:
    key = attrs["key"]
    grad = np.zeros_like(arrays[0])
    if isinstance(key, np.ndarray):
        np.add.at(grad, key, g)
    else:
        grad[key] = g
    return (grad,)


_RULES: dict[Primitive, Rule] = {
    Primitive.MATMUL: Rule(_check_matmul, _forward_matmul, _pullback_matmul),
    Primitive.ADD: Rule(_check_add, _forward_add, _pullback_add),
    Primitive.SCALE: Rule(_check_unary("scale"), _forward_scale, _pullback_scale),
    Primitive.TANH: Rule(_check_unary("elementwise_tanh"), _forward_tanh, _pullback_tanh),
    Primitive.COSH: Rule(_check_unary("elementwise_cosh"), _forward_cosh, _pullback_cosh),
    Primitive.SINH: Rule(_check_unary("elementwise_sinh"), _forward_sinh, _pullback_sinh),
    Primitive.SUM: Rule(_check_unary("sum"), _forward_sum, _pullback_sum),
    Primitive.WEIGHTED_SUM: Rule(_check_weighted_sum, _forward_weighted_sum, _pullback_weighted_sum),
    Primitive.RESHAPE: Rule(_check_reshape, _forward_reshape, _pullback_reshape),
    Primitive.CONCAT: Rule(_check_concat, _forward_concat, _pullback_concat),
    Primitive.SLICE: Rule(_check_slice, _forward_slice, _pullback_slice),
}


def record(primitive: Primitive, *inputs: Tensor, **attrs: Any) -> Tensor:
    """
    Apply a primitive and, if a tape is active, record it.

    Parameters
    ----------
    primitive : Primitive
        The operation to apply.
    *inputs : Tensor
        Operands.
    **attrs
        Non-differentiable arguments (`factor` for scale, `weights` for
        weighted_sum, `shape` for reshape, `axis` for concat, `key` for slice).

    Returns
    -------
    Tensor
        The result.

    Raises
    ------
    ShapeError
        If operand shapes violate the primitive's rule.
    NonFiniteError
        If the active tape is strict and a NaN/Inf is seen.
    """
    rule = _RULES[primitive]
    arrays = tuple(tensor.data for tensor in inputs)
    rule.check(arrays, attrs)
    out, aux = rule.forward(arrays, attrs)
    tape = _ACTIVE.get()
    if tape is None:
        return Tensor._wrap(out)
    if tape.strict and not (np.all(np.isfinite(out)) and all(np.all(np.isfinite(array)) for array in arrays)):
        raise NonFiniteError(f"{primitive.value}: non-finite value at primitive boundary")
    output = Tensor._wrap(out)
    node = Node(primitive, inputs, output, attrs, aux, tape, len(tape.nodes))
    output.node = node
    tape.nodes.append(node)
    return output


class Gradients(dict["Tensor", "FloatArray"]):
    """Mapping from leaf tensors to d(output)/d(leaf)."""

    def wrt(self, tensor: Tensor) -> FloatArray:
        """
        Gradient with respect to `tensor`; zeros if the output does not depend on it.
        """
        return self.get(tensor, np.zeros(tensor.shape, dtype=np.float64))


def backward(tape: Tape, output: Tensor, *, seed: float = 1.0) -> Gradients:
    """
    Reverse pass over `tape` starting from a scalar `output`.

    Parameters
    ----------
    tape : Tape
        The tape `output` was produced on.
    output : Tensor
        One-element tensor to differentiate.
    seed : float, optional
        Cotangent of the output, defaults to 1.

    Returns
    -------
    Gradients
        Gradient of every leaf reached from `output`; contributions along
        fan-out paths are summed.

    Raises
    ------
    TapeError
        If `output` is not a scalar or was not produced on `tape`.
    """
    if output.size != 1:
        raise TapeError(f"backward: output must be scalar, got shape {output.shape}")
    node = output.node
    if node is None or node.tape is not tape:
        raise TapeError("backward: output was not produced on this tape")

    pending: dict[int, FloatArray] = {id(output): np.full(output.shape, seed, dtype=np.float64)}
    tensors: dict[int, Tensor] = {id(output): output}
    for current in reversed(tape.nodes[: node.index + 1]):
        g = pending.pop(id(current.output), None)
        if g is None:
            continue
        rule = _RULES[current.primitive]
        arrays = tuple(tensor.data for tensor in current.inputs)
        contributions = rule.pullback(g, arrays, current.output.data, current.aux, current.attrs)
        for tensor, contribution in zip(current.inputs, contributions):
            if contribution is None:
                continue
            key = id(tensor)
            if key in pending:
                pending[key] = pending[key] + contribution
            else:
                pending[key] = contribution
                tensors[key] = tensor

    grads = Gradients()
    for key, grad in pending.items():
        tensor = tensors[key]
        if tensor.node is None:
            grads[tensor] = grad
    return grads


def grad_check(fn: Callable[[Tensor], Tensor], x: ArrayLike, step: float = 1e-5) -> float:
    """
    Compare [`backward`][nide._autodiff.backward] against central differences.

    Parameters
    ----------
    fn : Callable[[Tensor], Tensor]
        Pure scalar-valued function built from primitives.
    x : ArrayLike
        Point at which to compare.
    step : float, optional
        Finite-difference step.

    Returns
    -------
    float
        Worst component-wise relative error, using the denominator
        `max(|analytic|, |numeric|, 1e-12)`.
    """
    point = np.array(x, dtype=np.float64)
    with Tape() as tape:
        leaf = Tensor(point)
        out = fn(leaf)
    analytic = np.zeros_like(point) if out.node is None else backward(tape, out).wrt(leaf)

    numeric = np.zeros_like(point)
    for index in np.ndindex(point.shape):
        plus = point.copy()
        minus = point.copy()
        plus[index] += step
        minus[index] -= step
        numeric[index] = (fn(Tensor(plus)).item() - fn(Tensor(minus)).item()) / (2.0 * step)

    if point.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / scale))


# Convenience wrappers, one per primitive.


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two matrices or of two equally sized stacks of matrices."""
    return record(Primitive.MATMUL, a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two tensors of identical shape."""
    return record(Primitive.ADD, a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a constant."""
    return record(Primitive.SCALE, a, factor=float(factor))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    """`a - b`, as `add(a, scale(b, -1))`."""
    return add(a, scale(b, -1.0))


def tanh(a: Tensor) -> Tensor:
    return record(Primitive.TANH, a)


def cosh(a: Tensor) -> Tensor:
    return record(Primitive.COSH, a)


def sinh(a: Tensor) -> Tensor:
    return record(Primitive.SINH, a)


def reduce_sum(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    return record(Primitive.SUM, a)


def weighted_sum(weights: Sequence[float], xs: Sequence[Tensor]) -> Tensor:
    """`Σ weights[i] * xs[i]` with constant weights."""
    return record(Primitive.WEIGHTED_SUM, *xs, weights=tuple(float(weight) for weight in weights))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return record(Primitive.RESHAPE, a, shape=tuple(int(extent) for extent in shape))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return record(Primitive.CONCAT, *xs, axis=axis)


def take(a: Tensor, key: Index) -> Tensor:
    """Index along the leading axis (the `slice` primitive)."""
    return record(Primitive.SLICE, a, key=key)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """
    Full contraction `Σ a * b` of two tensors of equal size, as a 0-d tensor.
    """
    if a.size != b.size:
        raise ShapeError("matmul", (a.shape, b.shape), "dot needs operands of equal size")
    row = reshape(a, (1, a.size))
    column = reshape(b, (b.size, 1))
    return reshape(matmul(row, column), ())

from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Callable, ClassVar, Union

import numpy as np

from nide._autodiff import Tape, Tensor, add, backward, concat, dot, matmul, reshape, take, tanh
from nide._exceptions import DimensionError
from nide._models import MlpSpec, ParamVector, Segment

if TYPE_CHECKING:
    from nide._types import FloatArray

logger = logging.getLogger(__name__)

Params = Union[ParamVector, Tensor, "FloatArray"]
"""Anything that can stand for a flat parameter vector."""

Layer = tuple[Tensor, Tensor]


def _as_tensor(params: Params) -> Tensor:
    if isinstance(params, Tensor):
        return params
    if isinstance(params, ParamVector):
        return Tensor(params.values)
    return Tensor(params)


class Mlp:
    """
    A tanh multilayer perceptron whose parameters live outside of it.

    The network only knows its architecture; parameters are passed in as a flat
    vector laid out as `weight, bias` per layer, weights stored `(fan_in, fan_out)`
    so that a batch of rows propagates as `X @ W + b`.

    Parameters
    ----------
    spec : MlpSpec
        Architecture.
    name : str, optional
        Prefix of the parameter segments, defaults to the role of the class.
    """

    role: ClassVar[str] = "mlp"

    def __init__(self, spec: MlpSpec, *, name: str | None = None) -> None:
        self.spec = spec
        self.name = self.role if name is None else name

    def __repr__(self) -> str:
        widths = (self.spec.input_dim, *self.spec.hidden, self.spec.output_dim)
        return f"{self.__class__.__name__}(name={self.name!r}, widths={widths})"

    @property
    def parameter_count(self) -> int:
        return self.spec.parameter_count

    def segments(self, offset: int = 0) -> tuple[Segment, ...]:
        """Named segments of this network, starting at `offset`."""
        segments = []
        for index, (fan_in, fan_out) in enumerate(self.spec.layer_shapes):
            segments.append(Segment(name=f"{self.name}.{index}.weight", offset=offset, shape=(fan_in, fan_out)))
            offset += fan_in * fan_out
            segments.append(Segment(name=f"{self.name}.{index}.bias", offset=offset, shape=(fan_out,)))
            offset += fan_out
        return tuple(segments)

    def init_params(self, seed: int, *, scale: float = 1.0) -> ParamVector:
        """
        Draw initial parameters.

        Weights are uniform in `±scale/√fan_in`, biases are zero.

        Parameters
        ----------
        seed : int
            Seed of the PCG64 stream.
        scale : float, optional
            Multiplier of the uniform range.

        Returns
        -------
        ParamVector
            Parameters of this network, deterministic per `(spec, seed, scale)`.
        """
        rng = np.random.Generator(np.random.PCG64(seed))
        chunks = []
        for fan_in, fan_out in self.spec.layer_shapes:
            bound = scale / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return ParamVector(segments=self.segments(), values=np.concatenate(chunks))

    def layers(self, params: Params) -> list[Layer]:
        """Unpack a flat parameter tensor into `(weight, bias_row)` pairs."""
        flat = _as_tensor(params)
        if flat.shape != (self.parameter_count,):
            raise DimensionError(
                f"{self.name}: expected {self.parameter_count} parameters, got shape {flat.shape}"
            )
        layers = []
        offset = 0
        for fan_in, fan_out in self.spec.layer_shapes:
            weight = reshape(take(flat, slice(offset, offset + fan_in * fan_out)), (fan_in, fan_out))
            offset += fan_in * fan_out
            bias = reshape(take(flat, slice(offset, offset + fan_out)), (1, fan_out))
            offset += fan_out
            layers.append((weight, bias))
        return layers

    def bind(self, params: Params) -> Callable[[Tensor], Tensor]:
        """
        Fix the parameters once and return the raw input-to-output map.

        The returned callable accepts a single input `(input_dim,)` or a batch
        `(P, input_dim)`.
        """
        layers = self.layers(params)
        last = len(layers) - 1

        def apply(inputs: Tensor) -> Tensor:
            if inputs.ndim not in (1, 2) or inputs.shape[-1] != self.spec.input_dim:
                raise DimensionError(
                    f"{self.name}: expected inputs of width {self.spec.input_dim}, got shape {inputs.shape}"
                )
            single = inputs.ndim == 1
            hidden = reshape(inputs, (1, inputs.shape[0])) if single else inputs
            rows = hidden.shape[0]
            ones = Tensor(np.ones((rows, 1)))
            for index, (weight, bias) in enumerate(layers):
                hidden = matmul(hidden, weight)
                hidden = add(hidden, bias if rows == 1 else matmul(ones, bias))
                if index != last:
                    hidden = tanh(hidden)
            return reshape(hidden, (self.spec.output_dim,)) if single else hidden

        return apply

    def forward(self, params: Params, inputs: Tensor) -> Tensor:
        """
        Evaluate the network, recording on the active tape if any.

        Raises
        ------
        DimensionError
            If the input width or the parameter count do not match `self.spec`.
        """
        return self.bind(params)(inputs)

    def vjp_input(self, params: Params, inputs: FloatArray, cotangent: FloatArray) -> FloatArray:
        """
        `cotangentᵀ · ∂forward/∂inputs`, through a scoped backward pass.

        Parameters
        ----------
        params : ParamVector, Tensor or numpy.ndarray
            Flat parameters of this network.
        inputs : numpy.ndarray
            Evaluation point(s).
        cotangent : numpy.ndarray
            Same shape as the output of `forward`.

        Returns
        -------
        numpy.ndarray
            Same shape as `inputs`.
        """
        values = _as_tensor(params).data
        with Tape() as tape:
            leaf = Tensor(inputs)
            out = self.forward(Tensor(values), leaf)
            self._check_cotangent(out, cotangent)
            total = dot(out, Tensor(cotangent))
        return backward(tape, total).wrt(leaf)

    def vjp_params(self, params: Params, inputs: FloatArray, cotangent: FloatArray) -> FloatArray:
        """
        `cotangentᵀ · ∂forward/∂params`, flat in segment order.
        """
        with Tape() as tape:
            leaf = Tensor(_as_tensor(params).data)
            out = self.forward(leaf, Tensor(inputs))
            self._check_cotangent(out, cotangent)
            total = dot(out, Tensor(cotangent))
        return backward(tape, total).wrt(leaf)

    def jacobian(self, params: Params, inputs: FloatArray) -> FloatArray:
        """
        Input Jacobian of the raw map for every row of a batch.

        Parameters
        ----------
        params : ParamVector, Tensor or numpy.ndarray
            Flat parameters of this network.
        inputs : numpy.ndarray
            Batch of shape `(P, input_dim)`.

        Returns
        -------
        numpy.ndarray
            Shape `(P, output_dim, input_dim)`.
        """
        batch = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        rows, width = batch.shape[0], self.spec.output_dim
        jac = np.empty((rows, width, self.spec.input_dim))
        values = _as_tensor(params).data
        with Tape() as tape:
            leaf = Tensor(batch)
            out = self.bind(Tensor(values))(leaf)
            for column in range(width):
                basis = np.zeros((rows, width))
                basis[:, column] = 1.0
                jac[:, column, :] = backward(tape, dot(out, Tensor(basis))).wrt(leaf)
        return jac

    def _check_cotangent(self, out: Tensor, cotangent: FloatArray) -> None:
        if np.shape(cotangent) != out.shape:
            raise DimensionError(f"{self.name}: cotangent shape {np.shape(cotangent)} != output shape {out.shape}")


class DynamicsNet(Mlp):
    """The local term `f(t, y)`; time is concatenated in front of the state."""

    role = "dynamics"

    def __init__(self, spec: MlpSpec, *, name: str | None = None) -> None:
        if spec.input_dim != spec.output_dim + 1:
            raise DimensionError(f"dynamics net needs input_dim = n + 1, got {spec.input_dim} -> {spec.output_dim}")
        super().__init__(spec, name=name)

    @property
    def state_dim(self) -> int:
        return self.spec.output_dim

    def bind_rate(self, params: Params) -> Callable[[FloatArray, Tensor], Tensor]:
        """`(times (P,), states (P, n)) -> rates (P, n)`."""
        apply = self.bind(params)

        def rate(times: FloatArray, states: Tensor) -> Tensor:
            column = Tensor(np.asarray(times, dtype=np.float64).reshape(-1, 1))
            return apply(concat([column, states], axis=1))

        return rate


class IntegrandNet(Mlp):
    """The integrand `F: ℝⁿ → ℝᵐ` whose output spans the latent space."""

    role = "integrand"

    @property
    def state_dim(self) -> int:
        return self.spec.input_dim

    @property
    def latent_dim(self) -> int:
        return self.spec.output_dim

    def bind_map(self, params: Params) -> Callable[[Tensor], Tensor]:
        """`states (P, n) -> latent (P, m)`."""
        return self.bind(params)


class KernelNet(Mlp):
    """
    The kernel `K(t, s)`, an `n × m` matrix for every pair of times.

    Parameters
    ----------
    spec : MlpSpec
        Must have `input_dim = 2` and `output_dim = n·m`.
    state_dim : int
        Number of rows `n`.
    name : str, optional
        Segment prefix.
    """

    role = "kernel"

    def __init__(self, spec: MlpSpec, state_dim: int, *, name: str | None = None) -> None:
        if spec.input_dim != 2:
            raise DimensionError(f"kernel net takes (t, s) pairs, got input_dim {spec.input_dim}")
        if spec.output_dim % state_dim:
            raise DimensionError(f"kernel output {spec.output_dim} does not reshape to {state_dim} rows")
        super().__init__(spec, name=name)
        self.state_dim = state_dim
        self.latent_dim = spec.output_dim // state_dim

    def forward(self, params: Params, inputs: Tensor) -> Tensor:
        """Kernel matrices, `(n, m)` for one pair or `(P, n, m)` for a batch."""
        out = self.bind(params)(inputs)
        if out.ndim == 1:
            return reshape(out, (self.state_dim, self.latent_dim))
        return reshape(out, (out.shape[0], self.state_dim, self.latent_dim))

    def bind_kernel(self, params: Params) -> Callable[[FloatArray, FloatArray], Tensor]:
        """`(t (P,), s (P,)) -> K (P, n, m)`."""
        apply = self.bind(params)

        def kernel(t: FloatArray, s: FloatArray) -> Tensor:
            pairs = np.stack([np.ravel(t), np.ravel(s)], axis=1).astype(np.float64)
            out = apply(Tensor(pairs))
            return reshape(out, (pairs.shape[0], self.state_dim, self.latent_dim))

        return kernel

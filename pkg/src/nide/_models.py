from __future__ import annotations

from functools import cached_property
from typing import Annotated, Any, Literal, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    field_validator,
    model_validator,
)

from nide._exceptions import InvalidConfigError
from nide._types import FloatArray, ReadOnlyArray  # noqa: TC001


class ParentModel(BaseModel):
    model_config = ConfigDict(frozen=True, str_strip_whitespace=True, extra="forbid")


class ArrayModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)


def _parse_layers(value: Any) -> Any:
    """
    Accept hidden-layer layouts written as text, e.g. `"25,50,100"`, `""` or `"none"`.
    """
    if isinstance(value, str):
        text = value.strip().strip("[]()").strip()
        if text.casefold() == "none":
            return None
        return tuple(int(part) for part in text.replace(" ", ",").split(",") if part)
    return value


Layers = Annotated[Union[tuple[PositiveInt, ...], None], Field(default=None)]


class Trajectory(ArrayModel):
    """Ordered time stamps with the state observed at each of them."""

    times: ReadOnlyArray
    """Strictly increasing sample times, shape `(T,)`."""

    states: ReadOnlyArray
    """Observed states, shape `(T, n)`."""

    @model_validator(mode="after")
    def _check(self) -> Trajectory:
        if self.times.ndim != 1:
            raise ValueError("times must be one-dimensional")
        if self.states.ndim != 2 or self.states.shape[0] != self.times.shape[0]:
            raise ValueError(f"states must have shape (T, n) with T={self.times.shape[0]}, got {self.states.shape}")
        if self.times.shape[0] < 2:
            raise ValueError("a trajectory needs at least two samples")
        if self.states.shape[1] < 1:
            raise ValueError("state dimension must be at least 1")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.states))):
            raise ValueError("trajectory contains non-finite values")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        return self

    @property
    def length(self) -> int:
        """Number of samples `T`."""
        return int(self.times.shape[0])

    @property
    def state_dim(self) -> int:
        """State dimension `n`."""
        return int(self.states.shape[1])

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t1(self) -> float:
        return float(self.times[-1])

    @property
    def initial_state(self) -> FloatArray:
        """State at the first sample."""
        return np.array(self.states[0])

    def head(self, count: int) -> Trajectory:
        """The first `count` samples."""
        return Trajectory(times=self.times[:count], states=self.states[:count])


class Dataset(ArrayModel):
    """Trajectories of one system, with where they came from."""

    trajectories: tuple[Trajectory, ...]
    provenance: dict[str, str] = Field(default_factory=dict)
    """Generator name, seed, source directory, ..."""

    @model_validator(mode="after")
    def _check(self) -> Dataset:
        if not self.trajectories:
            raise ValueError("a dataset needs at least one trajectory")
        dims = {trajectory.state_dim for trajectory in self.trajectories}
        if len(dims) != 1:
            raise ValueError(f"trajectories disagree on the state dimension: {sorted(dims)}")
        return self

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def state_dim(self) -> int:
        return self.trajectories[0].state_dim

    @property
    def window(self) -> tuple[float, float]:
        """Earliest and latest sample time over all trajectories."""
        return min(item.t0 for item in self.trajectories), max(item.t1 for item in self.trajectories)


class MlpSpec(ParentModel):
    """Architecture of a tanh multilayer perceptron."""

    input_dim: PositiveInt
    hidden: tuple[PositiveInt, ...] = ()
    """Hidden widths; empty means a single affine map."""
    output_dim: PositiveInt
    activation: Literal["tanh"] = "tanh"
    final_activation: Literal["identity"] = "identity"

    @field_validator("hidden", mode="before")
    @classmethod
    def _layers(cls, value: Any) -> Any:
        parsed = _parse_layers(value)
        return () if parsed is None else parsed

    @cached_property
    def layer_shapes(self) -> tuple[tuple[int, int], ...]:
        """`(fan_in, fan_out)` of every affine layer."""
        widths = (self.input_dim, *self.hidden, self.output_dim)
        return tuple(zip(widths[:-1], widths[1:]))

    @cached_property
    def parameter_count(self) -> int:
        """`Σ (in·out + out)` over layers."""
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes)


class Segment(ParentModel):
    """A named slice of a [`ParamVector`][nide.ParamVector]."""

    name: str
    offset: NonNegativeInt
    shape: tuple[NonNegativeInt, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.offset + self.size


class ParamVector(ArrayModel):
    """Flat, deterministically ordered view of trainable parameters."""

    segments: tuple[Segment, ...] = ()
    values: ReadOnlyArray = Field(default_factory=lambda: np.zeros(0))

    @model_validator(mode="after")
    def _check(self) -> ParamVector:
        if self.values.ndim != 1:
            raise ValueError("parameter values must be a flat array")
        offset = 0
        for segment in self.segments:
            if segment.offset != offset:
                raise ValueError(f"segment {segment.name!r} starts at {segment.offset}, expected {offset}")
            offset = segment.stop
        if offset != self.values.shape[0]:
            raise ValueError(f"segments cover {offset} values but {self.values.shape[0]} are present")
        if len({segment.name for segment in self.segments}) != len(self.segments):
            raise ValueError("segment names must be unique")
        return self

    @property
    def size(self) -> int:
        return int(self.values.shape[0])

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(segment.name for segment in self.segments)

    def segment(self, name: str) -> Segment:
        for segment in self.segments:
            if segment.name == name:
                return segment
        raise KeyError(name)

    def view(self, name: str) -> FloatArray:
        """Values of one segment, reshaped to its shape."""
        segment = self.segment(name)
        return self.values[segment.offset : segment.stop].reshape(segment.shape)

    def span(self, prefix: str) -> tuple[int, int]:
        """`(start, stop)` of the contiguous run of segments named `prefix.*`."""
        members = [segment for segment in self.segments if segment.name.startswith(f"{prefix}.")]
        if not members:
            return 0, 0
        return members[0].offset, members[-1].stop

    def with_values(self, values: FloatArray) -> ParamVector:
        """Same layout, new values."""
        return ParamVector(segments=self.segments, values=values)

    @classmethod
    def concatenate(cls, *vectors: ParamVector) -> ParamVector:
        """Lay several vectors out one after another."""
        segments: list[Segment] = []
        offset = 0
        for vector in vectors:
            for segment in vector.segments:
                segments.append(Segment(name=segment.name, offset=offset, shape=segment.shape))
                offset += segment.size
        values = np.concatenate([vector.values for vector in vectors]) if vectors else np.zeros(0)
        return cls(segments=tuple(segments), values=values)


class QuadratureRule(ParentModel):
    """How integrals over `[α(t), β(t)]` are discretized."""

    kind: Literal["gauss_legendre", "monte_carlo"] = "gauss_legendre"
    node_count: PositiveInt = 32
    """Gauss–Legendre nodes per interval."""
    sample_count: PositiveInt = 1000
    """Monte-Carlo samples per interval."""
    seed: int = 0
    """Monte-Carlo seed."""

    @property
    def points(self) -> int:
        """Nodes (or samples) per interval."""
        return self.node_count if self.kind == "gauss_legendre" else self.sample_count


class Volterra(ParentModel):
    """`α(t) = a`, `β(t) = t`."""

    kind: Literal["volterra"] = "volterra"
    a: float | None = None
    """Lower limit; defaults to the start of the solve window."""

    def limits(self, times: FloatArray, t0: float, t1: float) -> tuple[FloatArray, FloatArray]:
        lower = t0 if self.a is None else self.a
        if lower > t0:
            raise InvalidConfigError(f"Volterra lower limit {lower} lies after the window start {t0}")
        return np.full_like(times, lower), np.array(times, dtype=np.float64)


class Fredholm(ParentModel):
    """`α(t) = a`, `β(t) = b`."""

    kind: Literal["fredholm"] = "fredholm"
    a: float | None = None
    """Lower limit; defaults to the start of the solve window."""
    b: float | None = None
    """Upper limit; defaults to the end of the solve window."""

    def limits(self, times: FloatArray, t0: float, t1: float) -> tuple[FloatArray, FloatArray]:
        lower = t0 if self.a is None else self.a
        upper = t1 if self.b is None else self.b
        if not t0 <= lower <= upper <= t1:
            raise InvalidConfigError(f"Fredholm limits [{lower}, {upper}] must lie inside [{t0}, {t1}]")
        return np.full_like(times, lower), np.full_like(times, upper)


IntervalSpec = Annotated[Union[Volterra, Fredholm], Field(discriminator="kind")]
"""Integration interval family of an IDE."""


class SolverConfig(ParentModel):
    """Controls of the successive-approximation solver."""

    grid_size: Annotated[int, Field(ge=2)] = 201
    max_iter: PositiveInt = 10
    tolerance: PositiveFloat = 1e-6
    """Relative sup-norm change between iterates at which the solve stops."""
    stepper: Literal["rk4", "euler"] = "rk4"
    quadrature: QuadratureRule = QuadratureRule()


class LossSpec(ArrayModel):
    """Mean squared error against an observed trajectory."""

    kind: Literal["mse"] = "mse"
    observed: Trajectory
    mask: tuple[bool, ...] | None = None
    """`True` marks an observation as hidden; hidden points contribute nothing."""

    @model_validator(mode="after")
    def _check(self) -> LossSpec:
        if self.mask is not None:
            if len(self.mask) != self.observed.length:
                raise ValueError(f"mask has {len(self.mask)} entries for {self.observed.length} observations")
            if all(self.mask):
                raise ValueError("at least one observation must be unmasked")
        return self

    @property
    def used(self) -> FloatArray:
        """Indices of the observations that enter the loss."""
        if self.mask is None:
            return np.arange(self.observed.length)
        return np.flatnonzero(~np.asarray(self.mask, dtype=bool))

    @property
    def last_used_time(self) -> float:
        return float(self.observed.times[self.used[-1]])


class GradMode(ParentModel):
    """How parameter gradients are computed."""

    kind: Literal["unrolled", "adjoint", "finite_difference"] = "unrolled"
    step: PositiveFloat = 1e-5
    """Central-difference step for `finite_difference`."""


class ModelConfig(ParentModel):
    """
    Architecture template of a learnable IDE system.

    A network whose hidden layout is `None` is absent: no `dynamics` gives a
    system without local term, no `kernel`/`integrand` gives K ≡ 0 (a neural ODE).
    """

    state_dim: PositiveInt
    latent_dim: PositiveInt | None = None
    """Dimension `m` of the integrand output; defaults to `state_dim`."""
    dynamics_hidden: Layers = (40,)
    kernel_hidden: Layers = (32, 32)
    integrand_hidden: Layers = (32, 32)
    interval: IntervalSpec = Volterra()
    init_scale: PositiveFloat = 1.0
    """Multiplies the uniform initialization range of every weight."""

    @field_validator("dynamics_hidden", "kernel_hidden", "integrand_hidden", mode="before")
    @classmethod
    def _layers(cls, value: Any) -> Any:
        return _parse_layers(value)

    @model_validator(mode="after")
    def _check(self) -> ModelConfig:
        if (self.kernel_hidden is None) != (self.integrand_hidden is None):
            raise ValueError("kernel and integrand must be both present or both absent")
        return self

    @property
    def m(self) -> int:
        return self.state_dim if self.latent_dim is None else self.latent_dim

    @property
    def has_integral(self) -> bool:
        return self.kernel_hidden is not None

    @cached_property
    def dynamics_spec(self) -> MlpSpec | None:
        if self.dynamics_hidden is None:
            return None
        return MlpSpec(input_dim=self.state_dim + 1, hidden=self.dynamics_hidden, output_dim=self.state_dim)

    @cached_property
    def kernel_spec(self) -> MlpSpec | None:
        if self.kernel_hidden is None:
            return None
        return MlpSpec(input_dim=2, hidden=self.kernel_hidden, output_dim=self.state_dim * self.m)

    @cached_property
    def integrand_spec(self) -> MlpSpec | None:
        if self.integrand_hidden is None:
            return None
        return MlpSpec(input_dim=self.state_dim, hidden=self.integrand_hidden, output_dim=self.m)

    @cached_property
    def parameter_count(self) -> int:
        specs = (self.dynamics_spec, self.kernel_spec, self.integrand_spec)
        return sum(spec.parameter_count for spec in specs if spec is not None)


class AdamConfig(ParentModel):
    beta1: Annotated[float, Field(ge=0.0, lt=1.0)] = 0.9
    beta2: Annotated[float, Field(ge=0.0, lt=1.0)] = 0.999
    eps: PositiveFloat = 1e-8


class ScheduleConfig(ParentModel):
    """Cosine annealing oscillating between `lr_max` and `lr_min`."""

    lr_max: PositiveFloat = 1e-3
    lr_min: PositiveFloat = 1e-7
    period: PositiveInt = 50
    """Epochs from one maximum to the next."""


class TrainConfig(ParentModel):
    epochs: PositiveInt = 100
    batch_size: PositiveInt = 16
    adam: AdamConfig = AdamConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    grad_mode: GradMode = GradMode()
    downsample_to: PositiveInt | None = 20
    """Points kept per trajectory; `None` keeps every sample."""
    seed: int = 0

    @field_validator("downsample_to", mode="before")
    @classmethod
    def _downsample(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip().casefold() in ("", "none"):
            return None
        return value


class MaskPolicy(ParentModel):
    """Which trailing observations are hidden during training."""

    kind: Literal["none", "tail_fraction"] = "none"
    max_fraction: Annotated[float, Field(gt=0.0, le=1.0)] = 0.5
    seed: int = 0


class TimeNormalization(ParentModel):
    """Affine map from data time to model time, `u = (t - offset) / span`."""

    offset: float = 0.0
    span: PositiveFloat = 1.0

    def to_model(self, times: FloatArray) -> FloatArray:
        return (np.asarray(times, dtype=np.float64) - self.offset) / self.span

    def to_data(self, times: FloatArray) -> FloatArray:
        return np.asarray(times, dtype=np.float64) * self.span + self.offset


class Checkpoint(ArrayModel):
    """A trained system together with everything needed to reuse it."""

    model: ModelConfig
    solver: SolverConfig
    params: ParamVector
    normalization: TimeNormalization = TimeNormalization()
    epoch: NonNegativeInt = 0
    history: tuple[float, ...] = ()
    """Training MSE per completed epoch."""
    final_mse: float | None = None
    """Training MSE of the final parameters."""
    downsample_to: PositiveInt | None = None
    """Points per trajectory the parameters were fitted on."""
    seeds: dict[str, int] = Field(default_factory=dict)
    config_hash: str = ""


class Metrics(ParentModel):
    """Per-point and pooled error metrics."""

    labels: tuple[str, ...]
    """Row labels: time indices, or horizons `t+1 .. t+H`."""
    mse: tuple[float, ...]
    r2: tuple[float | None, ...]
    """`None` where the ground truth has zero variance."""
    counts: tuple[int, ...]
    mse_total: float
    r2_total: float | None


class GeneratorSpec(ParentModel):
    """Recipe for a synthetic dataset."""

    name: Literal["ide_spiral_2d", "ide_curves_4d", "ode_spiral_2d", "decomp_curves_2d"]
    n_curves: PositiveInt = 1
    points_per_curve: Annotated[int, Field(ge=2)] = 20
    window: tuple[float, float] | None = None
    """Time window; defaults to the system's own."""
    ic_low: float | None = None
    ic_high: float | None = None
    """Uniform box for initial conditions; defaults to the system's own."""
    seed: int = 0
    scale: float | None = None
    """Kernel scale γ; defaults to the system's own."""
    quadrature: QuadratureRule = QuadratureRule()
    max_iter: PositiveInt = 10
    residual_tolerance: PositiveFloat = 5e-2

    @field_validator("window", mode="before")
    @classmethod
    def _window(cls, value: Any) -> Any:
        if isinstance(value, str):
            low, high = (float(part) for part in value.replace(" ", "").split(","))
            return low, high
        return value


class GradcheckConfig(ParentModel):
    tolerance: PositiveFloat = 1e-4
    """Relative error bound for unrolled vs finite differences and adjoint vs unrolled (K ≡ 0)."""
    min_cosine: Annotated[float, Field(ge=-1.0, le=1.0)] = 0.99
    """Adjoint vs unrolled cosine similarity required at small kernel scale."""
    fd_step: PositiveFloat = 1e-5
    grid_size: Annotated[int, Field(ge=2)] = 41
    node_count: PositiveInt = 8
    kernel_scales: tuple[float, ...] = (0.0, 0.001, 0.01, 0.1, 1.0)

    @field_validator("kernel_scales", mode="before")
    @classmethod
    def _scales(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(float(part) for part in value.replace(" ", "").split(",") if part)
        return value


class RunConfig(ParentModel):
    """Everything a CLI command resolved before starting work."""

    command: str
    seed: int = 0
    out: str | None = None
    solver: SolverConfig = SolverConfig()
    model: ModelConfig | None = None
    train: TrainConfig = TrainConfig()
    mask: MaskPolicy = MaskPolicy()
    generate: GeneratorSpec | None = None
    gradcheck: GradcheckConfig = GradcheckConfig()
    options: dict[str, str] = Field(default_factory=dict)
    """Command-specific flags that have no section of their own."""

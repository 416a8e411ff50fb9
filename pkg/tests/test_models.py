from __future__ import annotations

import numpy as np
import pytest
from pydantic import ValidationError

from nide import (
    Dataset,
    Fredholm,
    GeneratorSpec,
    GradcheckConfig,
    InvalidConfigError,
    LossSpec,
    ModelConfig,
    ParamVector,
    TimeNormalization,
    Trajectory,
    Volterra,
)
from nide._models import Segment

times = np.linspace(0.0, 1.0, 5)
trajectory = Trajectory(times=times, states=np.column_stack([times, times**2]))


def test_trajectory_arrays_are_private_and_read_only() -> None:
    source = np.array([0.0, 1.0])
    item = Trajectory(times=source, states=[[1.0], [2.0]])
    source[0] = 5.0
    assert item.times[0] == 0.0
    with pytest.raises(ValueError):
        item.states[0, 0] = 3.0
    assert (item.length, item.state_dim, item.t0, item.t1) == (2, 1, 0.0, 1.0)
    assert trajectory.head(3).length == 3


@pytest.mark.parametrize(
    "times, states",
    [
        ([0.0, 1.0, 1.0], [[0.0], [1.0], [2.0]]),
        ([0.0, 2.0, 1.0], [[0.0], [1.0], [2.0]]),
        ([0.0], [[0.0]]),
        ([0.0, 1.0], [[0.0], [np.nan]]),
        ([0.0, 1.0], [[0.0], [1.0], [2.0]]),
    ],
)
def test_invalid_trajectories(times: list[float], states: list[list[float]]) -> None:
    with pytest.raises(ValidationError):
        Trajectory(times=times, states=states)


def test_dataset_needs_one_dimension() -> None:
    other = Trajectory(times=[0.0, 1.0], states=[[0.0], [1.0]])
    with pytest.raises(ValidationError):
        Dataset(trajectories=(trajectory, other))
    with pytest.raises(ValidationError):
        Dataset(trajectories=())
    dataset = Dataset(trajectories=(trajectory, trajectory.head(2)))
    assert len(dataset) == 2
    assert dataset.window == (0.0, 1.0)


def test_param_vector_layout() -> None:
    a = ParamVector(segments=(Segment(name="a.0.weight", offset=0, shape=(2, 2)),), values=np.arange(4.0))
    b = ParamVector(segments=(Segment(name="b.0.bias", offset=0, shape=(3,)),), values=np.ones(3))
    joined = ParamVector.concatenate(a, b)
    assert joined.names == ("a.0.weight", "b.0.bias")
    assert joined.segment("b.0.bias").offset == 4
    assert joined.span("b") == (4, 7)
    assert joined.span("missing") == (0, 0)
    assert np.array_equal(joined.view("a.0.weight"), [[0.0, 1.0], [2.0, 3.0]])
    with pytest.raises(KeyError):
        joined.segment("c")

    with pytest.raises(ValidationError):
        ParamVector(segments=(Segment(name="a", offset=1, shape=(2,)),), values=np.zeros(3))
    with pytest.raises(ValidationError):
        ParamVector(segments=(Segment(name="a", offset=0, shape=(2,)),), values=np.zeros(3))


def test_loss_spec_masks() -> None:
    spec = LossSpec(observed=trajectory, mask=(False, False, True, False, True))
    assert list(spec.used) == [0, 1, 3]
    assert spec.last_used_time == times[3]
    with pytest.raises(ValidationError):
        LossSpec(observed=trajectory, mask=(True,) * 5)
    with pytest.raises(ValidationError):
        LossSpec(observed=trajectory, mask=(False,))


def test_model_config() -> None:
    config = ModelConfig(state_dim=2, latent_dim=3, dynamics_hidden="4", kernel_hidden="5", integrand_hidden="6")
    assert config.m == 3
    assert config.dynamics_spec is not None and config.dynamics_spec.input_dim == 3
    assert config.kernel_spec is not None and config.kernel_spec.output_dim == 6
    assert config.parameter_count == (3 * 4 + 4 + 4 * 2 + 2) + (2 * 5 + 5 + 5 * 6 + 6) + (2 * 6 + 6 + 6 * 3 + 3)

    node = ModelConfig(state_dim=2, kernel_hidden="none", integrand_hidden="none")
    assert not node.has_integral
    assert node.kernel_spec is None
    with pytest.raises(ValidationError):
        ModelConfig(state_dim=2, kernel_hidden=None)
    assert ModelConfig.model_validate({"state_dim": 2, "interval": {"kind": "fredholm"}}).interval == Fredholm()


def test_interval_limits() -> None:
    lower, upper = Volterra().limits(times, 0.0, 1.0)
    assert np.array_equal(lower, np.zeros(5))
    assert np.array_equal(upper, times)
    lower, upper = Fredholm(a=0.25).limits(times, 0.0, 1.0)
    assert np.all(lower == 0.25) and np.all(upper == 1.0)
    with pytest.raises(InvalidConfigError):
        Volterra(a=0.5).limits(times, 0.0, 1.0)
    with pytest.raises(InvalidConfigError):
        Fredholm(b=2.0).limits(times, 0.0, 1.0)


def test_time_normalization_round_trip() -> None:
    normalization = TimeNormalization(offset=2.0, span=4.0)
    assert np.allclose(normalization.to_model(np.array([2.0, 6.0])), [0.0, 1.0])
    assert np.allclose(normalization.to_data(normalization.to_model(times)), times)


def test_text_fields() -> None:
    assert GeneratorSpec(name="ide_spiral_2d", window="0, 2.5").window == (0.0, 2.5)
    assert GradcheckConfig(kernel_scales="0,0.5").kernel_scales == (0.0, 0.5)
    with pytest.raises(ValidationError):
        GeneratorSpec(name="lorenz")

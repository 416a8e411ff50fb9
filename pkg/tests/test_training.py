from __future__ import annotations

import numpy as np
import pytest

from nide import (
    Dataset,
    DimensionError,
    MaskPolicy,
    ModelConfig,
    ModelSummary,
    QuadratureRule,
    SolverConfig,
    SolverError,
    TrainConfig,
    TrainingDivergedError,
    Trajectory,
    UndefinedMetricError,
    compare_models,
    evaluate,
    extrapolate,
    make_node_baseline,
    predict_from_ic,
    train,
)
from nide._training import downsample, draw_mask, fit_normalization

times = np.linspace(0.0, 2.0, 8)
dataset = Dataset(
    trajectories=tuple(
        Trajectory(times=times, states=start * np.exp(-rate * times)[:, None])
        for rate, start in ((0.5, 1.0), (1.0, -0.5), (0.2, 0.8))
    )
)
template = ModelConfig(state_dim=1, dynamics_hidden=(3,), kernel_hidden=(2,), integrand_hidden=(2,))
solver = SolverConfig(grid_size=15, max_iter=3, quadrature=QuadratureRule(node_count=4))
config = TrainConfig(epochs=3, batch_size=2, downsample_to=None)


def test_training_is_deterministic() -> None:
    first = train(dataset, template, config, solver=solver)
    again = train(dataset, template, config, solver=solver, jobs=2)
    assert np.array_equal(first.checkpoint.params.values, again.checkpoint.params.values)
    assert first.history == again.history
    assert [record.epoch for record in first.history] == [0, 1, 2]
    assert first.history[0].lr == pytest.approx(config.schedule.lr_max)
    assert first.checkpoint.epoch == 3
    assert first.checkpoint.final_mse is not None
    assert first.checkpoint.history == tuple(record.train_mse for record in first.history)
    assert first.checkpoint.config_hash
    assert first.masks == (None, None, None)


def test_training_loss_decreases_over_schedule_periods() -> None:
    period = config.schedule.period
    run = config.model_copy(update={"epochs": 3 * period, "batch_size": len(dataset.trajectories)})
    result = train(dataset, template, run, solver=solver)
    losses = np.array([record.train_mse for record in result.history]).reshape(3, period)
    windows = losses.mean(axis=1)
    assert np.all(np.isfinite(losses))
    assert windows[1] <= windows[0]
    assert windows[2] <= windows[1]


def test_training_seed_changes_the_start() -> None:
    first = train(dataset, template, config, solver=solver)
    other = train(dataset, template, config.model_copy(update={"seed": 1}), solver=solver)
    assert not np.array_equal(first.checkpoint.params.values, other.checkpoint.params.values)


def test_training_with_masks() -> None:
    policy = MaskPolicy(kind="tail_fraction", max_fraction=0.5, seed=3)
    result = train(dataset, template, config, policy, solver)
    assert len(result.masks) == 3
    for mask in result.masks:
        assert mask is not None and len(mask) == 8
        hidden = sum(mask)
        assert hidden <= 4
        assert mask == tuple([False] * (8 - hidden) + [True] * hidden)
    assert result.checkpoint.seeds == {"seed": 0, "mask": 3}


def test_training_divergence(monkeypatch: pytest.MonkeyPatch) -> None:
    def failing(*args: object, **kwargs: object) -> None:
        raise SolverError("state became non-finite", iteration=1, time=0.5)

    monkeypatch.setattr("nide._training.compute_gradient", failing)
    with pytest.raises(TrainingDivergedError) as info:
        train(dataset, template, config, solver=solver)
    assert info.value.checkpoint is not None
    assert info.value.checkpoint.epoch == 0


def test_training_dimension_mismatch() -> None:
    with pytest.raises(DimensionError):
        train(dataset, ModelConfig(state_dim=2), config, solver=solver)


def test_evaluate_and_extrapolate() -> None:
    checkpoint = train(dataset, template, config, solver=solver).checkpoint

    metrics = evaluate(checkpoint, dataset)
    assert metrics.labels == tuple(str(point) for point in range(8))
    assert metrics.counts == (3,) * 8
    assert metrics.mse[0] == 0.0
    assert metrics.r2[0] == 1.0

    masks = [(False,) * 6 + (True, True), None, (False,) * 7 + (True,)]
    masked = evaluate(checkpoint, dataset, masks)
    assert masked.labels == ("t+1", "t+2")
    assert masked.counts == (2, 1)
    assert masked.r2[1] is None
    with pytest.raises(UndefinedMetricError):
        evaluate(checkpoint, dataset, [None, None, None])
    with pytest.raises(DimensionError):
        evaluate(checkpoint, dataset, masks[:2])

    prediction = extrapolate(checkpoint, dataset.trajectories[0].head(5), 3)
    assert prediction.observed_points == 5
    assert prediction.trajectory.length == 8
    assert np.allclose(prediction.trajectory.times, times)
    with pytest.raises(ValueError):
        extrapolate(checkpoint, dataset.trajectories[0], -1)

    fresh = predict_from_ic(checkpoint, [0.3], (0.0, 2.0))
    assert fresh.trajectory.length == 20
    assert fresh.trajectory.states[0, 0] == 0.3


def test_node_baseline_matches_the_budget() -> None:
    big = ModelConfig(state_dim=2, dynamics_hidden=(32,), kernel_hidden=(16,), integrand_hidden=(16,))
    baseline = make_node_baseline(big)
    assert not baseline.has_integral
    assert abs(baseline.parameter_count - big.parameter_count) <= 0.02 * big.parameter_count
    assert baseline.dynamics_hidden == (65,)

    tiny = make_node_baseline(template)
    assert tiny.parameter_count <= template.parameter_count or (
        abs(tiny.parameter_count - template.parameter_count) <= 0.02 * template.parameter_count
    )


def test_compare_models() -> None:
    nide, node = compare_models(dataset, template, config.model_copy(update={"epochs": 1}), (0, 1), solver=solver)
    assert (nide.name, node.name) == ("nide", "node")
    assert nide.parameter_count == template.parameter_count
    assert nide.seeds == node.seeds == (0, 1)
    assert len(nide.final_mse) == len(node.final_mse) == 2


def test_model_summary() -> None:
    summary = ModelSummary(name="nide", parameter_count=10, seeds=(0, 1), final_mse=(1.0, 3.0))
    assert summary.mean == 2.0
    assert summary.std == 1.0


def test_preprocessing() -> None:
    assert fit_normalization(dataset).span == 2.0
    sampled = downsample(dataset.trajectories[0], 3)
    assert list(sampled.times) == [0.0, times[4], 2.0]
    assert downsample(dataset.trajectories[0], None) is dataset.trajectories[0]

    assert draw_mask(10, MaskPolicy(), 0) is None
    policy = MaskPolicy(kind="tail_fraction", max_fraction=1.0, seed=2)
    masks = [draw_mask(4, policy, index) for index in range(50)]
    assert masks == [draw_mask(4, policy, index) for index in range(50)]
    assert all(mask is not None and not mask[0] for mask in masks)
    assert {sum(mask or ()) for mask in masks} == {0, 1, 2, 3}

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from nide import (
    Checkpoint,
    CheckpointError,
    Dataset,
    Fredholm,
    IdeSystem,
    InvalidConfigError,
    InvalidTrajectoryError,
    Metrics,
    ModelConfig,
    RunConfig,
    SolverConfig,
    TimeNormalization,
    Trajectory,
    load_checkpoint,
    load_config,
    load_csv,
    load_dataset,
    load_masks,
    load_metrics,
    load_truth,
    save_checkpoint,
    save_config,
    save_csv,
    save_masks,
    save_metrics,
    write_dataset,
)
from nide._io import read_config, save_rows

template = ModelConfig(
    state_dim=2, dynamics_hidden=(4,), kernel_hidden=(3, 3), integrand_hidden=(3,), interval=Fredholm()
)
checkpoint = Checkpoint(
    model=template,
    solver=SolverConfig(grid_size=51),
    params=IdeSystem.from_config(template, seed=2).params,
    normalization=TimeNormalization(offset=0.5, span=3.0),
    epoch=4,
    history=(1.0, 0.5, 0.25, 0.125),
    final_mse=0.1,
    seeds={"seed": 2, "mask": 0},
)


def test_csv_round_trip_is_exact(tmp_path: Path) -> None:
    rng = np.random.default_rng(0)
    times = np.cumsum(rng.random(7)) / 3.0
    trajectory = Trajectory(times=times, states=rng.normal(size=(7, 3)))
    path = save_csv(trajectory, tmp_path / "nested" / "curve.csv")
    assert path.read_text().splitlines()[0] == "t,y0,y1,y2"
    loaded = load_csv(path)
    assert np.array_equal(loaded.times, trajectory.times)
    assert np.array_equal(loaded.states, trajectory.states)


def test_csv_quoting(tmp_path: Path) -> None:
    path = tmp_path / "quoted.csv"
    path.write_text('t,"y0"\n0,"1.5"\n1,2\n', encoding="utf-8")
    loaded = load_csv(path)
    assert np.array_equal(loaded.states[:, 0], [1.5, 2.0])

    path.write_text('t,y0\n0,"1"x\n', encoding="utf-8")
    with pytest.raises(InvalidTrajectoryError) as info:
        load_csv(path)
    assert info.value.row == 2


def test_checkpoint_round_trip(tmp_path: Path) -> None:
    manifest = save_checkpoint(checkpoint, tmp_path / "checkpoint")
    assert manifest.name == "manifest.xml"
    blobs = sorted(item.name for item in manifest.parent.glob("*.bin"))
    assert blobs == ["dynamics.bin", "integrand.bin", "kernel.bin"]

    loaded = load_checkpoint(tmp_path / "checkpoint")
    assert np.array_equal(loaded.params.values, checkpoint.params.values)
    assert loaded.params.segments == checkpoint.params.segments
    assert loaded.model.model_dump() == template.model_dump()
    assert loaded.solver == checkpoint.solver
    assert loaded.normalization == checkpoint.normalization
    assert loaded.history == checkpoint.history
    assert loaded.final_mse == 0.1
    assert loaded.seeds == {"seed": 2, "mask": 0}
    assert loaded.config_hash
    assert load_checkpoint(manifest, expected_hash=loaded.config_hash).epoch == 4


def test_checkpoint_errors(tmp_path: Path) -> None:
    manifest = save_checkpoint(checkpoint, tmp_path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path, expected_hash="0" * 64)

    stored = load_checkpoint(tmp_path).config_hash
    manifest.write_text(manifest.read_text().replace(stored, "f" * 64))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)

    save_checkpoint(checkpoint, tmp_path)
    blob = tmp_path / "kernel.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)

    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


def test_config_round_trip(tmp_path: Path) -> None:
    config = RunConfig(command="train", seed=3, model=template, options={"dataset": "data"})
    path = save_config(config, tmp_path)
    assert path.name == "config.xml"
    loaded = load_config(path)
    assert loaded.model is not None
    assert loaded.model.model_dump() == template.model_dump()
    assert loaded.model_dump(exclude={"model"}) == config.model_dump(exclude={"model"})

    bare = RunConfig(command="gradcheck")
    assert load_config(save_config(bare, tmp_path / "bare")) == bare


def test_hand_written_config(tmp_path: Path) -> None:
    path = tmp_path / "config.xml"
    path.write_text('<config><solver grid_size="101"/><train><epochs>5</epochs></train></config>')
    sections = read_config(path)
    assert sections == {"solver": {"grid_size": "101"}, "train": {"epochs": "5"}}
    config = RunConfig.model_validate({"command": "train", **sections})
    assert config.solver.grid_size == 101
    assert config.train.epochs == 5

    path.write_text("<config><solver grid_size='-1'/></config>")
    with pytest.raises(InvalidConfigError):
        load_config(path)
    path.write_text("<config>")
    with pytest.raises(InvalidConfigError):
        read_config(path)


def test_dataset_directories(tmp_path: Path) -> None:
    times = np.linspace(0.0, 1.0, 4)
    trajectories = tuple(Trajectory(times=times, states=np.column_stack([times + k, -times])) for k in range(11))
    dataset = Dataset(trajectories=trajectories, provenance={"system": "hand"})
    write_dataset(dataset, tmp_path / "with_manifest")
    loaded = load_dataset(tmp_path / "with_manifest")
    assert len(loaded) == 11
    assert loaded.provenance["system"] == "hand"
    assert load_truth(tmp_path / "with_manifest") == ()

    bare = tmp_path / "bare"
    for index, trajectory in enumerate(trajectories):
        save_csv(trajectory, bare / f"curve_{index}.csv")
    ordered = load_dataset(bare)
    assert [item.states[0, 0] for item in ordered.trajectories] == [float(k) for k in range(11)]

    with pytest.raises(InvalidTrajectoryError):
        load_dataset(tmp_path / "empty")
    save_csv(Trajectory(times=times, states=np.zeros((4, 1))), bare / "curve_11.csv")
    with pytest.raises(InvalidTrajectoryError):
        load_dataset(bare)


def test_masks_round_trip(tmp_path: Path) -> None:
    masks = ((False, False, True), None, (False,) * 4)
    path = save_masks(masks, tmp_path / "masks.csv")
    assert path.read_text().splitlines()[1:] == ["0,3,1", "1,,none", "2,4,0"]
    assert load_masks(path) == masks

    path.write_text("curve,length,hidden\n0,3,3\n")
    with pytest.raises(InvalidTrajectoryError) as info:
        load_masks(path)
    assert info.value.row == 2


def test_metrics_files(tmp_path: Path) -> None:
    metrics = Metrics(
        labels=("t+1", "t+2"), mse=(0.5, 0.25), r2=(0.9, None), counts=(3, 1), mse_total=0.4, r2_total=0.8
    )
    table, report = save_metrics(metrics, tmp_path)
    assert table.read_text().splitlines() == [
        "label,count,mse,r2",
        "t+1,3,0.5,0.90000000000000002",
        "t+2,1,0.25,undefined",
        "all,4,0.40000000000000002,0.80000000000000004",
    ]
    assert load_metrics(report) == metrics


def test_save_rows(tmp_path: Path) -> None:
    path = save_rows(tmp_path / "rows.csv", ["name", "value", "score"], [("a", 0.5, None), ("b", 1, 2.0)])
    assert path.read_text() == "name,value,score\na,0.5,undefined\nb,1,2\n"

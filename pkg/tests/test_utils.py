from __future__ import annotations

from pathlib import Path

import numpy as np

from nide import ModelConfig, SolverConfig
from nide._utils import config_hash, format_float, realpath, stable_key, substream, substream_seed


def test_realpath() -> None:
    assert realpath("~") == Path.home().resolve()
    assert realpath("a/../b") == Path.cwd().resolve() / "b"


def test_stable_key() -> None:
    assert stable_key("init") == stable_key("init")
    assert stable_key("init") != stable_key("mask")
    assert 0 <= stable_key("quadrature") < 2**32


def test_substreams_are_named_and_reproducible() -> None:
    assert np.array_equal(substream(7, "ic", 0).random(4), substream(7, "ic", 0).random(4))
    assert not np.array_equal(substream(7, "ic", 0).random(4), substream(7, "ic", 1).random(4))
    assert not np.array_equal(substream(7, "ic", 0).random(4), substream(7, "mask", 0).random(4))
    assert not np.array_equal(substream(7, "ic", 0).random(4), substream(8, "ic", 0).random(4))
    assert substream_seed(1, "init") == substream_seed(1, "init")


def test_config_hash() -> None:
    model = ModelConfig(state_dim=2)
    assert config_hash(model, SolverConfig()) == config_hash(ModelConfig(state_dim=2), SolverConfig())
    assert config_hash(model, SolverConfig()) != config_hash(model, SolverConfig(grid_size=101))
    assert len(config_hash(model)) == 64


def test_format_float() -> None:
    assert format_float(0.1) == "0.1"
    assert float(format_float(1 / 3)) == 1 / 3
    assert format_float(5) == "5.0"

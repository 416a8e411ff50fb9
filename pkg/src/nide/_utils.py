from __future__ import annotations

import hashlib
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from pydantic import BaseModel

    from nide._types import StrPath


def realpath(path: StrPath, /) -> Path:
    """
    Canonicalize a given path.
    """
    return Path(path).expanduser().resolve()


def stable_key(name: str, /) -> int:
    """
    Deterministic 32-bit key for a stream name.

    Python's builtin `hash` is salted per process, so it cannot be used
    to derive reproducible random streams.
    """
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """
    Named, independent random stream derived from a master seed.

    Parameters
    ----------
    seed : int
        Master seed.
    name : str
        Stream name, e.g. `"init"`, `"mask"`, `"quadrature"`, `"ic"`.
    *keys : int
        Further integers (curve index, call index, ...) that select a child stream.

    Returns
    -------
    numpy.random.Generator
        A PCG64 generator, portable across platforms.
    """
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(stable_key(name), *keys))
    return np.random.Generator(np.random.PCG64(sequence))


def substream_seed(seed: int, name: str, *keys: int) -> int:
    """
    Integer seed drawn from [`substream`][nide._utils.substream], for APIs that take plain seeds.
    """
    return int(substream(seed, name, *keys).integers(0, 2**63 - 1))


def config_hash(*models: BaseModel) -> str:
    """
    Stable content hash of one or more configuration models.
    """
    digest = hashlib.sha256()
    for model in models:
        digest.update(type(model).__name__.encode("utf-8"))
        digest.update(model.model_dump_json().encode("utf-8"))
    return digest.hexdigest()


def format_float(value: float, /) -> str:
    """
    Shortest text that parses back to exactly `value`.
    """
    return repr(float(value))

from __future__ import annotations

from os import PathLike
from typing import Annotated, Any, TypeAlias, Union

import numpy as np
import numpy.typing as npt
from pydantic import BeforeValidator

StrPath: TypeAlias = Union[str, PathLike[str]]
"""String or pathlib.Path"""

FloatArray: TypeAlias = npt.NDArray[np.float64]
"""Dense array of 64-bit floats."""

IntArray: TypeAlias = npt.NDArray[np.int64]
"""Dense array of 64-bit integers."""


def _readonly_float_array(value: Any) -> FloatArray:
    array = np.array(value, dtype=np.float64)
    array.setflags(write=False)
    return array


ReadOnlyArray = Annotated[FloatArray, BeforeValidator(_readonly_float_array)]
"""float64 array that's always a private, read-only copy."""

from __future__ import annotations


class NIDEException(Exception):
    """Base exception for all nide exceptions"""

    def __init__(self, message: str) -> None:
        self.message = message
        """Human readable error message"""
        super().__init__(message)

    def __str__(self) -> str:
        """Equivalent to accessing the .message attribute"""
        return self.message

    def __repr__(self) -> str:
        return f'{self.__class__.__name__}("{self.message}")'


class ShapeError(NIDEException):
    """Operand shapes do not conform to a primitive's rule"""

    def __init__(self, primitive: str, shapes: tuple[tuple[int, ...], ...], detail: str = "") -> None:
        self.primitive = primitive
        """Name of the offending primitive."""
        self.shapes = shapes
        """Shapes of the operands that were passed to it."""
        rendered = ", ".join(str(shape) for shape in shapes)
        message = f"{primitive}: incompatible operand shapes {rendered}"
        super().__init__(f"{message} ({detail})" if detail else message)


class NonFiniteError(NIDEException):
    """A NaN or Inf was produced where only finite values are allowed"""


class TapeError(NIDEException):
    """Misuse of a tape, e.g. differentiating a non-scalar or a foreign output"""


class DimensionError(NIDEException):
    """Dimensions of networks, systems or data are incompatible"""


class SolverError(NIDEException):
    """The IDE solver met a non-finite state while stepping"""

    def __init__(self, message: str, *, iteration: int, time: float) -> None:
        self.iteration = iteration
        """Successive-approximation iterate in which the failure happened."""
        self.time = time
        """Time at which the state became non-finite."""
        super().__init__(message)


class InvalidTrajectoryError(NIDEException):
    """Malformed trajectory data"""

    def __init__(self, message: str, *, row: int | None = None) -> None:
        self.row = row
        """1-based row number in the source file, if known."""
        super().__init__(message if row is None else f"row {row}: {message}")


class InvalidConfigError(NIDEException):
    """Malformed or inconsistent configuration or manifest"""


class CheckpointError(NIDEException):
    """Unreadable checkpoint or configuration hash mismatch"""


class GenerationError(NIDEException):
    """A generated curve failed the solver residual check"""

    def __init__(self, message: str, *, seed: int, curve: int, residual: float) -> None:
        self.seed = seed
        """Master seed of the failing generation run."""
        self.curve = curve
        """Index of the offending curve."""
        self.residual = residual
        """Residual that exceeded the tolerance."""
        super().__init__(message)


class TrainingDivergedError(NIDEException):
    """Training produced non-finite losses and was aborted"""

    def __init__(self, message: str, *, checkpoint: object) -> None:
        self.checkpoint = checkpoint
        """The last checkpoint whose loss was finite."""
        super().__init__(message)


class UndefinedMetricError(NIDEException):
    """A metric is undefined for the given data (e.g. zero-variance targets)"""

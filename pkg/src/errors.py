"""Exception hierarchy and warning tallies shared by every defectforge module."""
import threading


class DefectForgeError(Exception):
    """Base class for all errors raised by defectforge."""


class ShapeError(DefectForgeError):
    """Operand shapes do not fit an operation."""

    def __init__(self, op, dimension, expected, got):
        self.op = op
        self.dimension = dimension
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: {dimension} expected {expected}, got {got}")


class GraphError(DefectForgeError):
    """Misuse of a computation graph (reuse, missing graph)."""


class NumericsError(DefectForgeError):
    """Non-finite, non-symmetric or out-of-range numerical input."""


class MissingGradientError(DefectForgeError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"parameter '{name}' has no gradient")


class GeometryError(DefectForgeError):
    """Invalid box or drivable polygon."""


class DatasetError(DefectForgeError):
    """Dataset is empty, inconsistent or cannot be written."""


class ConfigError(DefectForgeError):
    """Unknown configuration key or invalid value."""


class CheckpointError(DefectForgeError):
    """Checkpoint file is malformed or does not match the network."""


class TrainingDivergedError(DefectForgeError):
    """A loss component became NaN or infinite."""

    def __init__(self, step, component, value):
        self.step = step
        self.component = component
        self.value = value
        super().__init__(f"step {step}: loss component '{component}' is {value}")


class WarningCounter:
    """Thread-safe tally of recoverable conditions (under-filled masks, skipped loss terms)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n: int = 1) -> None:
        with self._lock:
            self._count += n

    @property
    def count(self) -> int:
        with self._lock:
            return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0

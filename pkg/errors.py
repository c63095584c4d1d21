"""
Exception hierarchy for the labeling pipeline.

Every error carries the process exit code the CLI maps it to:
  1  usage / configuration error
  2  data error (parse, taxonomy, integrity, layout, I/O)
  3  numeric / training error
"""


class PipelineError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class ConfigError(PipelineError):
    """Invalid or unknown configuration value."""

    exit_code = 1

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

class DataError(PipelineError):
    exit_code = 2


class ParseError(DataError):
    """Malformed manifest or prediction line."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class TaxonomyError(DataError):
    """Species name or id not in the taxonomy."""


class IntegrityError(DataError):
    """Duplicate ids or inconsistent event labels."""


class SplitError(DataError):
    """Dataset cannot be split as requested."""


class InvalidCountError(DataError):
    """Animal count outside the binned range (counts start at 1)."""


class DimensionError(DataError):
    """Array shapes do not line up."""


class LayoutMismatchError(DataError):
    """Checkpoint head layout does not fit the dataset."""


class EmptyClassError(DataError):
    """A class has no examples where at least one is required."""


class UnattainableTargetError(DataError):
    """No threshold on the grid reaches the target accuracy."""

    def __init__(self, target: float, max_achievable: float | None):
        shown = "n/a" if max_achievable is None else f"{max_achievable:.4f}"
        super().__init__(f"target {target:.4f} unattainable (max achievable {shown})")
        self.target = target
        self.max_achievable = max_achievable


# ---------------------------------------------------------------------------
# Numerics
# ---------------------------------------------------------------------------

class NumericError(PipelineError):
    """Non-finite activation or gradient."""

    exit_code = 3


class TrainingError(NumericError):
    """Training diverged (loss became non-finite)."""

    def __init__(self, epoch: int, batch: int, message: str = "loss is not finite"):
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")
        self.epoch = epoch
        self.batch = batch

"""Exception types shared across the package.

The CLI maps each class to a process exit code, so library code raises
these instead of bare ``ValueError``/``RuntimeError``.
"""


class KnnDistError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(KnnDistError, ValueError):
    """Bad input values, shapes, or parameter combinations."""

    exit_code = 2


class ArtifactError(KnnDistError, OSError):
    """Missing, corrupt, or checksum-mismatched artifact files."""

    exit_code = 3


class BudgetError(KnnDistError):
    """A requested structure would exceed the configured memory budget."""

    exit_code = 4

    def __init__(self, message, required_bytes=None, budget_bytes=None):
        super().__init__(message)
        self.required_bytes = required_bytes
        self.budget_bytes = budget_bytes


class TrainingDiverged(KnnDistError, ArithmeticError):
    """Training produced a non-finite loss."""

    exit_code = 2

    def __init__(self, epoch):
        super().__init__(f"training diverged: non-finite loss at epoch {epoch}")
        self.epoch = epoch

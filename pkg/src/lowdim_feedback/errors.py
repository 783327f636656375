"""Exception types shared by all modules.

Each one subclasses the builtin a caller would already catch, so plain
`except ValueError` keeps working.
"""


class LabError(Exception):
    """Base class for every error raised by lowdim_feedback."""


class InvalidInputError(LabError, ValueError):
    """Non-finite or otherwise unusable numeric input."""


class DimensionError(LabError, ValueError):
    """Matrix shapes do not chain."""


class InvalidRankError(LabError, ValueError):
    """Requested rank is outside the admissible range."""


class MisuseError(LabError, TypeError):
    """Operation called on the wrong kind of feedback pathway."""


class DivergenceError(LabError, RuntimeError):
    """Training or integration blew up.

    Carries the training step or the integration time of the failure.
    """

    def __init__(self, message: str, step: int | None = None, time: float | None = None):
        super().__init__(message)
        self.step = step
        self.time = time


class ConfigError(LabError, ValueError):
    """Experiment configuration failed validation. Holds every violation found."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class ComparisonError(LabError, RuntimeError):
    """Simulation and theory curves disagree beyond tolerance."""

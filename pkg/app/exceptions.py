"""Exception hierarchy for the scheduling toolkit.

Library modules raise these; only the command line maps them to exit codes.
"""

from typing import Optional


class SchedulerToolkitError(Exception):
    """Base class for every error raised by the toolkit."""


class ParseError(SchedulerToolkitError):
    """Malformed SWF input."""

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class EmptyTrace(SchedulerToolkitError):
    """A trace ended up with no usable job."""


class InsufficientJobs(SchedulerToolkitError):
    """A sequence longer than the trace was requested."""


class ConfigError(SchedulerToolkitError):
    """Invalid configuration value or combination."""


class IllegalAction(SchedulerToolkitError):
    """The agent picked a masked observation slot."""


class EmptyQueue(SchedulerToolkitError):
    """A scheduler was asked to choose from an empty queue."""


class NoLegalAction(SchedulerToolkitError):
    """Every observation slot is masked."""


class MissingUserInfo(SchedulerToolkitError):
    """A fairness goal was used on jobs without user ids."""


class TrainingDiverged(SchedulerToolkitError):
    """A loss became non-finite during an update."""


class ModelFormatError(SchedulerToolkitError):
    """A model file is unreadable or does not match the expected shapes."""

"""Command exit codes and the error report written by a failed command."""

from __future__ import annotations

from enum import IntEnum, unique

from planediff.manifest import Manifest


@unique
class EXIT(IntEnum):
    """Process exit codes of the `planediff` commands."""

    OK = 0
    """Success."""

    RUNTIME = 1
    """The command started but failed (diverged loss, corrupt artifact, ...)."""

    USAGE = 2
    """Bad arguments or configuration, or a missing upstream artifact."""


class ErrorReport(Manifest):
    """Written as `error.json` in the run directory of a failed command."""

    KIND = "error"

    command: str
    rc: EXIT
    """Exit code."""
    rsn: str
    """Reason: the exception type and message."""
    step: int | None = None
    """Optimizer step at which training diverged, when applicable."""
    lr: float | None = None
    """Learning rate in effect when training diverged, when applicable."""

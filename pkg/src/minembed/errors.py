"""Exception types shared across the pipeline.

Every failure carries a stable machine-readable code (``E_*``) so that
callers and the command-line front end can map errors without parsing
message text.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base failure with a stable error code."""

    exit_code = 2

    def __init__(self, code: str, message: str) -> None:
        super().__init__(f"{code}: {message}")
        self.code = code


class UsageError(PipelineError):
    """Bad invocation: unknown flags, missing arguments, malformed options."""

    exit_code = 1

    def __init__(self, message: str) -> None:
        super().__init__("E_USAGE", message)


class DataError(PipelineError):
    """Invalid or inconsistent input data."""

    exit_code = 2


class NumericError(PipelineError):
    """Numeric failure: non-finite loss or gradients, zero vectors."""

    exit_code = 3

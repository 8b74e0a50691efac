"""Exception hierarchy mapped to CLI exit codes."""


class PipelineError(Exception):
    """Base class for expected failures; exit_code is what the CLI returns."""

    exit_code = 1


class ValidationError(PipelineError):
    """Invariant or contract violation in inputs or configuration."""

    exit_code = 1


class InputError(PipelineError):
    """Missing, unreadable, or unwritable files and directories."""

    exit_code = 2


class NumericError(PipelineError):
    """Non-finite values or numeric breakdown during computation."""

    exit_code = 3

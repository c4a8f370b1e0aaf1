"""Error types shared across the pipeline.

Each error class carries the process exit code used by the command-line
tool: configuration and data problems exit with 2, numeric failures
(singular matrices, overflow, non-convergence treated as fatal) with 1.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigurationError(PipelineError):
    """Invalid configuration: bad edges, degrees, smoothness class, flags."""

    exit_code = 2


class DataError(PipelineError):
    """Invalid or inconsistent input data."""

    exit_code = 2


class NumericError(PipelineError):
    """Numeric failure: singular systems, overflow, failed factorizations."""

    exit_code = 1

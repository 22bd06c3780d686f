"""Error taxonomy shared across the pipeline.

The CLI maps these onto exit codes: configuration errors, I/O errors and
numeric failures are reported distinctly.
"""

from __future__ import annotations

from .arrayio import IoError

__all__ = ["ConfigError", "IoError", "NumericError", "BlowUpError", "SamplingError"]


class ConfigError(ValueError):
    """Invalid configuration or inconsistent request."""


class NumericError(RuntimeError):
    """A computation produced non-finite or out-of-range values."""


class BlowUpError(NumericError):
    """Simulation blow-up: a vorticity field left the finite range."""

    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


class SamplingError(NumericError):
    """Sampler state became non-finite mid-trajectory."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step

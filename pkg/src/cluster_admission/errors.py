"""Exception types raised across the package."""
from __future__ import annotations

from typing import Optional


class AdmissionError(RuntimeError):
    """Base class for errors the CLI reports without a traceback."""

    exit_code = 1


class ConfigError(AdmissionError):
    """Unreadable or invalid configuration."""

    exit_code = 2


class GridMismatchError(AdmissionError):
    pass


class InfeasibleBracketError(AdmissionError):
    """Even the lower bound of a calibration bracket violates the SLA."""

    def __init__(self, message: str, *, lower: float, denial_rate: float):
        super().__init__(message)
        self.lower = lower
        self.denial_rate = denial_rate


class DegenerateSampleError(AdmissionError):
    pass


class TraceFormatError(AdmissionError):
    def __init__(self, message: str, *, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line

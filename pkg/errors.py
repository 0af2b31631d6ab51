"""
Benchmark Error Types
=====================

Single exception hierarchy for the training engine and harness. Kernels and
loaders raise these; the CLI maps ``BenchError`` to a clean exit code.
"""

from __future__ import annotations

from typing import Any, Dict, Optional


class BenchError(Exception):
    """Base class for every error raised deliberately by this package."""


class ShapeError(BenchError, ValueError):
    """Operand shapes or dimensions do not agree."""


class NonFiniteError(BenchError, FloatingPointError):
    """A kernel, loss or gradient produced NaN or Inf."""

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        self.context: Dict[str, Any] = dict(context or {})
        if self.context:
            detail = ", ".join(f"{k}={v}" for k, v in self.context.items())
            message = f"{message} ({detail})"
        super().__init__(message)

    def with_context(self, **context: Any) -> "NonFiniteError":
        merged = {**context, **self.context}
        base = str(self).split(" (")[0]
        return NonFiniteError(base, merged)


class DatasetError(BenchError):
    """Dataset files are missing, malformed or inconsistent."""


class ConfigError(BenchError, ValueError):
    """Experiment configuration is invalid, cyclic or incomplete."""


class UnknownSpecError(ConfigError):
    """Architecture, dataset or algorithm is not in the catalog."""


class MeterError(BenchError):
    """Energy or memory meter could not produce a reading."""


class ReportError(BenchError):
    """Result tables cannot be compared or are malformed."""


class LabelError(BenchError, ValueError):
    """Class label outside ``[0, num_classes)``."""


class ContainerError(DatasetError):
    """Binary tensor container is truncated or has a bad header."""

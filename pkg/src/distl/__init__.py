"""Self-evolving semi-supervised image classification with teacher-student distillation."""

from distl.errors import (
    DegenerateComparisonWarning,
    InvalidConfigError,
    InvalidInputError,
    InvalidSpecError,
    NonFiniteLossError,
    UndefinedMetricError,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateComparisonWarning",
    "InvalidConfigError",
    "InvalidInputError",
    "InvalidSpecError",
    "NonFiniteLossError",
    "UndefinedMetricError",
]

"""Collaborative data-quality control for distributed adapter fine-tuning, at desk scale."""
from __future__ import annotations

from .errors import (CluesError, ConfigError, DataError, DimensionError, IncompatibleAdaptersError,
                     LabelAccessError, NumericError, StageError, StateError, StepIndexError,
                     UndefinedMetricError)

__version__ = "0.1.0"

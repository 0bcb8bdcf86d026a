"""Numerical toolkit for the extended Harper's model."""

from harper.config import ConfigError, HarperError, NumericGuardError

__all__ = ["ConfigError", "HarperError", "NumericGuardError"]

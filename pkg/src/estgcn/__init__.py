"""Spatiotemporal graph forecasting with an extreme-value (peaks over threshold) loss."""

__version__ = "0.1.0"

from .errors import ConfigError, EstgcnError, FitError, InputError, NumericError  # noqa: E402

__all__ = ["__version__", "ConfigError", "EstgcnError", "FitError", "InputError", "NumericError"]

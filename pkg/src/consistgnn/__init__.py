"""Consistency training and self-ensembling for sampled graph neural networks."""

from .errors import ConfigError, NonFiniteError, ShapeError, TapeStateError

__all__ = ["ConfigError", "NonFiniteError", "ShapeError", "TapeStateError"]
__version__ = "0.1.0"

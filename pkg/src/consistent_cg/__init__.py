"""Sequential multilevel sample reweighting for compositional consistency, at desk scale."""

from .errors import DataError, GraphError, NumericError, ShapeError

__version__ = "0.1.0"

__all__ = ["DataError", "GraphError", "NumericError", "ShapeError", "__version__"]

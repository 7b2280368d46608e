"""Privacy-aware feature selection and architecture search with DP training and budget accounting."""

from .numerics import RngStream, derive_stream

__all__ = ["RngStream", "derive_stream"]
__version__ = "0.1.0"

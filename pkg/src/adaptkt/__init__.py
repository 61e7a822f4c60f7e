"""Domain-adaptive knowledge tracing.

An LSTM knowledge tracer whose question inputs come from a text
autoencoder.  The model is trained on a source domain, carried to a
target domain via instance selection and hidden-state alignment, then
fine-tuned on whatever labeled target data exists.
"""

from .errors import (
    AdaptKTError,
    DataError,
    NumericError,
    ShapeError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptKTError",
    "DataError",
    "NumericError",
    "ShapeError",
    "UsageError",
    "__version__",
]

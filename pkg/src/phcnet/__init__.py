"""phcnet: parameterized hypercomplex convolutional networks on a
self-contained CPU autograd engine."""

from . import autograd, checkpoint, data, metrics, models, nn, phc, tensor, training
from .errors import PhcnetError

__all__ = [
    "autograd",
    "checkpoint",
    "data",
    "metrics",
    "models",
    "nn",
    "phc",
    "tensor",
    "training",
    "PhcnetError",
]

__version__ = "0.1.0"

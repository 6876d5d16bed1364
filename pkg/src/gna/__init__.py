"""Multi-focus Gaussian neighborhood attention and a desk-scale video crowd localizer."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]

"""smoothfit: sparse estimation and selection of mixed smooth regression models."""

from ._backend import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]

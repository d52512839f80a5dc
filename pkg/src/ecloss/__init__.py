"""ECLoss: activation-template mutual-information loss and explainability metrics."""
from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]

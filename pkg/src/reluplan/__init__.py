"""ReLU-budgeted network planning for private inference."""

from .errors import ReluPlanError

__version__ = "0.1.0"

__all__ = ["ReluPlanError", "__version__"]

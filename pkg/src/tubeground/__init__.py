"""Multi-object spatio-temporal grounding engine and evaluation toolkit."""

__version__ = "0.1.0"

from tubeground.config import RunConfig

__all__ = ["RunConfig", "__version__"]

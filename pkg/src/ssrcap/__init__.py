"""Self-supervised rewarding for unpaired cross-lingual image captioning on a synthetic micro-world."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]

"""HTTP adapter exposing box-prompt segmentation over a fixed wire protocol.

Serves either a real MedSAM checkpoint or a deterministic stub (the filled
request box) for protocol conformance testing without model weights.
"""

from .config import AdapterConfig

__all__ = ["AdapterConfig"]

__version__ = "0.1.0"

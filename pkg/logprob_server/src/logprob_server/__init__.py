"""HTTP sidecar exposing a causal language model's scoring, generation,
and embedding abilities as a small JSON API."""

from .app import create_app
from .config import ServerConfig
from .model import BadRequest, Busy, ModelRunner, OverLength

__version__ = "0.1.0"

__all__ = [
    "BadRequest",
    "Busy",
    "ModelRunner",
    "OverLength",
    "ServerConfig",
    "create_app",
    "__version__",
]

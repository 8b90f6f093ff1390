from .core import Coordinator
from .server import create_app

__all__ = ["Coordinator", "create_app"]

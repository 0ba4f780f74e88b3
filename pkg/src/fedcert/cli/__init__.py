"""CLI for fedcert"""

from .main import main

__all__ = ["main"]

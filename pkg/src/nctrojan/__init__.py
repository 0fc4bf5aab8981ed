"""Desk-scale Neural Collapse and trojan-cleansing laboratory."""

from ._accel import backend_name
from .rng import RngStream

__version__ = "0.1.0"
__all__ = ["RngStream", "backend_name", "__version__"]

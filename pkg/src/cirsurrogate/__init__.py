"""Surrogate model for channel impulse responses of a reactive duct with Poiseuille flow."""

from .core import ChannelParams, FixedGeometry, TimeGrid, validate_params

__all__ = ["ChannelParams", "FixedGeometry", "TimeGrid", "validate_params"]
__version__ = "0.1.0"

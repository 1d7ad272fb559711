"""Stereo disparity estimation with dilated dense blocks and context fusion."""

from .errors import ConfigError, DataError, DiscoError, NumericError, ShapeError
from .tensor import ConvSpec, Tensor, no_grad

__all__ = [
    "ConfigError",
    "ConvSpec",
    "DataError",
    "DiscoError",
    "NumericError",
    "ShapeError",
    "Tensor",
    "no_grad",
]

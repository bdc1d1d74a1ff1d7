"""Residual neural decision forests for regression, on a small numpy autodiff engine."""
from .forest import ForestConfig, LeafParams
from .backbone import BackboneConfig
from .model import RNDF

__all__ = ["RNDF", "BackboneConfig", "ForestConfig", "LeafParams"]
__version__ = "0.1.0"

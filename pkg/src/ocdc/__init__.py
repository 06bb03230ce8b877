"""Simulator, calibration and lowering toolkit for an optical coherent dot-product chip."""

from .errors import OcdcError
from .optics import ChipState, DeviationProfile, coarse_chip, dot_product, ideal_chip, make_chip

__all__ = ["OcdcError", "ChipState", "DeviationProfile", "coarse_chip", "dot_product", "ideal_chip", "make_chip"]
__version__ = "0.1.0"

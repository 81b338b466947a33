"""Learned (ColorCNN, ColorCNN+) and classical color quantization for recognition."""

from .classic import IndexedImage, median_cut, median_cut_dither, octree_quantize
from .codec import bits_per_pixel, decode_indexed_png, encode_indexed_png
from .errors import (CheckpointError, ColorCNNError, ConfigError, DatasetError, FileMissingError,
                     NumericalError)
from .losses import LossWeights, relationship_loss
from .quantnet import BackboneConfig, ColorCNN, ColorCNNPlus, build_quantnet

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "CheckpointError", "ColorCNN", "ColorCNNError", "ColorCNNPlus",
    "ConfigError", "DatasetError", "FileMissingError", "IndexedImage", "LossWeights",
    "NumericalError", "bits_per_pixel", "build_quantnet", "decode_indexed_png",
    "encode_indexed_png", "median_cut", "median_cut_dither", "octree_quantize",
    "relationship_loss",
]

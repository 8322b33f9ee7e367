"""Hierarchical long-term video prediction on a synthetic bouncing-shapes world."""
from .shapes_world import PALETTE, Dataset, ShapeSpec, WorldConfig
from .model import NetSpec, VideoPredictor

__all__ = ["PALETTE", "Dataset", "ShapeSpec", "WorldConfig", "NetSpec", "VideoPredictor"]
__version__ = "0.1.0"

"""Temporal Earth-observation instruction data and evaluation toolkit."""
from ._accel import backend_name
from .geom import BBox, Mask, Polygon, TileTransform, min_aabb, rasterize, transform_box
from .metrics import MetricReport, class_weighted_f1, pixel_f1

__version__ = "0.1.0"

__all__ = ["BBox", "Mask", "MetricReport", "Polygon", "TileTransform", "backend_name", "class_weighted_f1",
           "min_aabb", "pixel_f1", "rasterize", "transform_box"]

"""Distributed sparse-view Gaussian splatting: rendering, initialization, training, aggregation."""
from .core import Camera, GaussianModel, Region, look_at, point_in_region
from .raster import RenderOptions, render, render_backward

__version__ = "0.1.0"

__all__ = ["Camera", "GaussianModel", "Region", "look_at", "point_in_region", "RenderOptions", "render",
           "render_backward", "__version__"]

from .projection import SplatProjection, project_gaussian, project_gaussians
from .render import RenderOutput, backward_call_count, rasterize_backward, rasterize_forward
from .tiles import TileGrid, bin_tiles

__all__ = [
    "SplatProjection", "project_gaussian", "project_gaussians", "RenderOutput", "backward_call_count",
    "rasterize_backward", "rasterize_forward", "TileGrid", "bin_tiles",
]

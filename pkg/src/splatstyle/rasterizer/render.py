"""Differentiable tile-based rendering of color, feature and alpha maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import UsageError
from ..scene import Camera, GaussianParams, build_covariance, eval_sh
from . import _kernels
from .projection import project_gaussians
from .tiles import TileGrid, bin_tiles

DEFAULT_TILE_SIZE = 16

_backward_calls = 0


def backward_call_count() -> int:
    """Number of rasterizer backward passes executed in this process."""
    return _backward_calls


@dataclass
class _Replay:
    mean2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    features: np.ndarray
    background: np.ndarray
    tiles: TileGrid
    final_T: np.ndarray
    n_contrib: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    feature_map: np.ndarray  # (H, W, F)
    alpha_map: np.ndarray  # (H, W)
    replay: _Replay | None = None

    @property
    def transmittance(self) -> np.ndarray:
        return self.replay.final_T


def _f64(a):
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    return np.ascontiguousarray(a, dtype=np.float64)


def rasterize_forward(mean2d, conic, opacity, colors, features, depth, radius, visible,
                      width, height, background=(0.0, 0.0, 0.0), tile_size=DEFAULT_TILE_SIZE) -> RenderOutput:
    """Front-to-back compositing of projected splats.

    ``opacity`` is the activated opacity in (0, 1). Features may have zero channels.
    """
    n = len(_f64(depth))
    features = _f64(features).reshape(n, -1)
    tiles = bin_tiles(_f64(mean2d), _f64(radius), _f64(depth), np.asarray(visible, dtype=bool), width, height, tile_size)
    args = (_f64(mean2d), _f64(conic), _f64(opacity), _f64(colors), features, _f64(background))
    color, feat, alpha, final_T, n_contrib = _kernels.composite_forward(
        *args, tiles.entry_gauss, tiles.tile_ranges, int(width), int(height), int(tile_size)
    )
    return RenderOutput(color, feat, alpha, _Replay(*args, tiles, final_T, n_contrib))


def rasterize_backward(out: RenderOutput, grad_color=None, grad_features=None, grad_alpha=None) -> dict:
    """Gradients of a scalar loss w.r.t. the 2D splat inputs of ``rasterize_forward``."""
    global _backward_calls
    r = out.replay
    if r is None:
        raise UsageError("render output carries no replay data; rerun rasterize_forward")
    h, w = out.alpha_map.shape
    n_feat = r.features.shape[1]
    grad_color = np.zeros((h, w, 3)) if grad_color is None else _f64(grad_color)
    grad_features = np.zeros((h, w, n_feat)) if grad_features is None else _f64(grad_features)
    grad_alpha = np.zeros((h, w)) if grad_alpha is None else _f64(grad_alpha)
    g_mean, g_conic, g_opac, g_color, g_feat = _kernels.composite_backward(
        r.mean2d, r.conic, r.opacity, r.colors, r.features, r.background,
        r.tiles.entry_gauss, r.tiles.tile_ranges, w, h, r.tiles.tile_size,
        r.final_T, r.n_contrib, grad_color, grad_features, grad_alpha,
    )
    _backward_calls += 1
    return {"mean2d": g_mean, "conic": g_conic, "opacity": g_opac, "colors": g_color, "features": g_feat}


class _RasterizeFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mean2d, conic, opacity, colors, features, depth, radius, visible, width, height, background, tile_size):
        out = rasterize_forward(mean2d, conic, opacity, colors, features, depth, radius, visible,
                                width, height, background, tile_size)
        ctx.out = out
        ctx.dtype = mean2d.dtype
        ctx.mark_non_differentiable(*[])
        as_t = lambda a: torch.from_numpy(a).to(mean2d.dtype)
        return as_t(out.color), as_t(out.feature_map), as_t(out.alpha_map)

    @staticmethod
    def backward(ctx, grad_color, grad_feat, grad_alpha):
        grads = rasterize_backward(ctx.out, grad_color, grad_feat, grad_alpha)
        ctx.out = None
        as_t = lambda a: torch.from_numpy(a).to(ctx.dtype)
        return (as_t(grads["mean2d"]), as_t(grads["conic"]), as_t(grads["opacity"]), as_t(grads["colors"]),
                as_t(grads["features"]), None, None, None, None, None, None, None)


def gaussian_colors(params: GaussianParams, cam: Camera) -> torch.Tensor:
    center = torch.as_tensor(cam.center, dtype=params.means.dtype)
    dirs = params.means - center
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    return (eval_sh(params.sh_degree, params.sh, dirs) + 0.5).clamp(0.0, 1.0)


def render(params: GaussianParams, cam: Camera, with_features: bool = True, features: torch.Tensor | None = None,
           tile_size: int = DEFAULT_TILE_SIZE, colors: torch.Tensor | None = None) -> dict:
    """Render (deformed) Gaussians from ``cam``.

    Returns tensors ``color`` (H, W, 3), ``features`` (H, W, F) (zero channels when
    ``with_features`` is False), ``alpha`` (H, W) plus the projection dict under
    ``"projection"``; ``projection["mean2d"]`` retains its gradient for densification.
    ``features`` overrides the per-Gaussian feature vectors (used by stylization).
    """
    cov3d = build_covariance(params.rotations, params.log_scales)
    proj = project_gaussians(params.means, cov3d, cam)
    if proj["mean2d"].requires_grad:
        proj["mean2d"].retain_grad()
    if colors is None:
        colors = gaussian_colors(params, cam)
    opacity = torch.sigmoid(params.opacity_logits)
    if with_features:
        feats = params.features if features is None else features
    else:
        feats = params.means.new_zeros((len(params), 0))
    color, feat_map, alpha = _RasterizeFunction.apply(
        proj["mean2d"], proj["conic"], opacity, colors, feats, proj["depth"].detach(), proj["radius"],
        proj["visible"].numpy(), cam.width, cam.height, np.asarray(params.background, dtype=np.float64), tile_size,
    )
    return {"color": color, "features": feat_map, "alpha": alpha, "projection": proj}

"""Channel statistics, running content statistics and AdaIN on Gaussian features."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from ._validation import check_feature_map, check_unit_interval
from .codec import FeatureCodec, pool_features
from .deformation import deform_scene
from .errors import UsageError
from .rasterizer.render import render
from .scene import Camera, GaussianParams

STD_FLOOR = 1e-6


def _vec(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64) if not isinstance(x, torch.Tensor) else x).double().reshape(-1)


@dataclass(frozen=True)
class ChannelStats:
    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self):
        mean, std = _vec(self.mean), _vec(self.std).clamp_min(STD_FLOOR)
        if mean.shape != std.shape:
            raise UsageError("mean and std must have the same length")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def __len__(self):
        return self.mean.shape[0]


def compute_stats(fm, mask=None) -> ChannelStats:
    """Per-channel mean and population std of a (C, h, w) map, optionally weighted by ``mask`` (h, w)."""
    fm = check_feature_map(fm).double()
    x = fm.reshape(fm.shape[0], -1)
    if mask is None:
        mean = x.mean(1)
        var = ((x - mean[:, None]) ** 2).mean(1)
    else:
        w = torch.as_tensor(mask).double().reshape(-1)
        if w.shape[0] != x.shape[1]:
            raise UsageError("mask does not match the feature map resolution")
        total = w.sum()
        if not total > 0:
            raise UsageError("mask has no positive weight")
        mean = (x * w).sum(1) / total
        var = (((x - mean[:, None]) ** 2) * w).sum(1) / total
    return ChannelStats(mean, var.sqrt())


@dataclass(frozen=True)
class RunningStats:
    """Moving-average content statistics collected during training.

    ``mode="ema"``: x <- m * x + (1 - m) * batch, with the first update copying the
    batch. ``mode="cumulative"``: plain running mean of all batches.
    """

    mean_avg: torch.Tensor | None = None
    std_avg: torch.Tensor | None = None
    momentum: float = 0.9
    update_count: int = 0
    mode: str = "ema"

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise UsageError("momentum must lie in [0, 1)")
        if self.mode not in ("ema", "cumulative"):
            raise UsageError(f"unknown running-stats mode {self.mode!r}")

    @property
    def initialized(self) -> bool:
        return self.update_count > 0

    def update(self, batch: ChannelStats) -> RunningStats:
        if not self.initialized:
            return replace(self, mean_avg=batch.mean.clone(), std_avg=batch.std.clone(), update_count=1)
        if batch.mean.shape != self.mean_avg.shape:
            raise UsageError("batch statistics do not match the running statistics shape")
        m = self.momentum if self.mode == "ema" else self.update_count / (self.update_count + 1)
        mean = m * self.mean_avg + (1 - m) * batch.mean
        std = (m * self.std_avg + (1 - m) * batch.std).clamp_min(STD_FLOOR)
        return replace(self, mean_avg=mean, std_avg=std, update_count=self.update_count + 1)

    def as_stats(self) -> ChannelStats:
        if not self.initialized:
            raise UsageError("running statistics have never been updated")
        return ChannelStats(self.mean_avg, self.std_avg)


def update_running(rs: RunningStats, batch: ChannelStats) -> RunningStats:
    return rs.update(batch)


@dataclass(frozen=True)
class StyleCode:
    stats: ChannelStats

    @classmethod
    def from_image(cls, codec: FeatureCodec, image) -> StyleCode:
        return cls(compute_stats(codec.encode(image)))

    def __len__(self):
        return len(self.stats)


def adain_map(F_c, content: ChannelStats, style: ChannelStats) -> torch.Tensor:
    """style.std * (F_c - content.mean) / content.std + style.mean, per channel of a (C, h, w) map."""
    F_c = check_feature_map(F_c)
    if len(content) != F_c.shape[0] or len(style) != F_c.shape[0]:
        raise UsageError("statistics do not match the number of channels")
    s = lambda v: v.to(F_c.dtype)[:, None, None]
    return s(style.std) * (F_c - s(content.mean)) / s(content.std) + s(style.mean)


@dataclass(frozen=True)
class StyleTransform:
    """Per-channel affine f -> scale * f + shift equivalent to AdaIN with fixed content statistics.

    Built once per (running statistics, style) pair; independent of camera and time.
    """

    scale: torch.Tensor
    shift: torch.Tensor

    @classmethod
    def from_stats(cls, rs: RunningStats | ChannelStats, style: StyleCode | ChannelStats) -> StyleTransform:
        content = rs.as_stats() if isinstance(rs, RunningStats) else rs
        target = style.stats if isinstance(style, StyleCode) else style
        if len(content) != len(target):
            raise UsageError("style and content statistics have different feature dimensions")
        scale = target.std / content.std
        return cls(scale, target.mean - scale * content.mean)

    def apply(self, features: torch.Tensor) -> torch.Tensor:
        # written in the AdaIN form so the identity style is exact up to rounding
        return self.scale.to(features.dtype) * features + self.shift.to(features.dtype)


def stylize_gaussians(params: GaussianParams, rs: RunningStats, style: StyleCode,
                      transform: StyleTransform | None = None) -> GaussianParams:
    """Copy of ``params`` whose features are AdaIN-transformed with the running content statistics."""
    if not isinstance(rs, RunningStats) or not rs.initialized:
        raise UsageError("stylization needs running statistics with at least one update")
    if isinstance(params, GaussianParams) is False:
        params = GaussianParams.from_scene(params)
    content = rs.as_stats()
    target = style.stats
    if transform is None:
        f = params.features.detach()
        s = lambda v: v.to(f.dtype)
        new = s(target.std) * (f - s(content.mean)) / s(content.std) + s(target.mean)
    else:
        new = transform.apply(params.features.detach())
    return params.replace(features=new)


def interpolate_styles(a: StyleCode, b: StyleCode, w: float) -> StyleCode:
    w = check_unit_interval("interpolation weight", w)
    if len(a) != len(b):
        raise UsageError("styles have different feature dimensions")
    if w == 0.0:
        return a
    if w == 1.0:
        return b
    mean = (1 - w) * a.stats.mean + w * b.stats.mean
    std = (1 - w) * a.stats.std + w * b.stats.std
    return StyleCode(ChannelStats(mean, std))


def render_stylized(scene, field, head, cam: Camera, t, style: StyleCode, rs: RunningStats,
                    codec: FeatureCodec, deform_rotation_scale=True, return_features=False,
                    transform: StyleTransform | None = None):
    """deform -> AdaIN on Gaussian features -> rasterize features -> pool -> decode.

    Runs without building any autograd graph; returns an (H, W, 3) image tensor
    (and the pooled stylized feature map when ``return_features``). Pass a prebuilt
    ``transform`` to reuse the per-channel coefficients across frames.
    """
    with torch.no_grad():
        params = deform_scene(scene, field, head, t, deform_rotation_scale)
        styled = stylize_gaussians(params, rs, style, transform)
        out = render(styled, cam)
        pooled = pool_features(out["features"], codec.downsample)
        image = codec.decode(pooled)
    if return_features:
        return image, pooled
    return image

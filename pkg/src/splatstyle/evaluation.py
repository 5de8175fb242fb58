"""Warped temporal/multi-view consistency of stylized renders, plus the comparison baselines."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .codec import FeatureCodec, feature_distance, pool_features
from .deformation import deform_scene
from .errors import UsageError
from .rasterizer.render import render
from .scene import Camera, GaussianParams, GaussianScene
from .stylization import (
    RunningStats, StyleCode, StyleTransform, adain_map, compute_stats, render_stylized, stylize_gaussians,
)

ALPHA_MIN = 0.5
DEPTH_TOL = 0.01
SCALE = 1e3


@dataclass
class FlowField:
    """Per-pixel displacement (H, W, 2) in pixels on the reference grid, and its validity mask."""

    flow: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.flow.ndim != 3 or self.flow.shape[-1] != 2 or self.mask.shape != self.flow.shape[:2]:
            raise UsageError("flow must be (H, W, 2) with an (H, W) mask")
        self.mask &= np.isfinite(self.flow).all(-1)
        self.flow = np.where(self.mask[..., None], self.flow, 0.0)

    @classmethod
    def zeros(cls, height, width) -> FlowField:
        return cls(np.zeros((height, width, 2)), np.ones((height, width), dtype=bool))

    @property
    def shape(self):
        return self.mask.shape


def _params_at(scene, fld, head, t) -> GaussianParams:
    with torch.no_grad():
        p = deform_scene(scene, fld, head, t)
    return p.replace(**{k: getattr(p, k).detach().double() for k in GaussianParams.FIELDS})


def _camera_depth(means: torch.Tensor, cam: Camera) -> torch.Tensor:
    R = torch.as_tensor(cam.R, dtype=means.dtype)
    T = torch.as_tensor(cam.T, dtype=means.dtype)
    return (means @ R.T + T)[:, 2]


def flow_between(params_v: GaussianParams, cam_v: Camera, params_ref: GaussianParams, cam_ref: Camera) -> FlowField:
    """Flow on the ``cam_ref`` grid pointing to where each surface point lands in ``cam_v``.

    ``params_v`` and ``params_ref`` are the same Gaussians at the two timestamps. Each
    reference pixel is lifted along its ray to the composited depth, moved by the
    composited per-Gaussian displacement between the timestamps (same blending weights)
    and projected into ``cam_v``. Pixels with alpha < 0.5, landing out of view, or whose
    reprojected depth disagrees with the depth rendered in ``cam_v`` by more than 1% are
    masked.
    """
    if len(params_v) != len(params_ref):
        raise UsageError("both parameter sets must describe the same Gaussians")
    with torch.no_grad():
        depth_ref = _camera_depth(params_ref.means, cam_ref)[:, None]
        payload = torch.cat([depth_ref, params_v.means - params_ref.means], -1)
        out = render(params_ref, cam_ref, features=payload)
        alpha = out["alpha"].numpy()
        acc = out["features"].numpy()
        safe = np.maximum(alpha, 1e-12)
        d = acc[..., 0] / safe
        delta = acc[..., 1:4] / safe[..., None]
        h, w = alpha.shape
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        ray = np.stack([(xs - cam_ref.cx) / cam_ref.fx, (ys - cam_ref.cy) / cam_ref.fy, np.ones_like(xs)], -1)
        Rr, Tr = np.asarray(cam_ref.R), np.asarray(cam_ref.T)
        q = (ray * d[..., None] - Tr) @ Rr + delta
        R, T = np.asarray(cam_v.R), np.asarray(cam_v.T)
        pc = q @ R.T + T
        z = pc[..., 2]
        zs = np.where(z > 1e-9, z, 1.0)
        u = cam_v.fx * pc[..., 0] / zs + cam_v.cx
        v = cam_v.fy * pc[..., 1] / zs + cam_v.cy
        flow = np.stack([u - xs, v - ys], -1)
        mask = (alpha >= ALPHA_MIN) & (z > 1e-9)
        mask &= (u >= 0) & (u <= cam_v.width - 1) & (v >= 0) & (v <= cam_v.height - 1)
        # visibility: the depth seen by cam_v at the landing point must match
        depth_feat = _camera_depth(params_v.means, cam_v)[:, None]
        dv = render(params_v, cam_v, features=depth_feat)
        depth_v = dv["features"][..., 0].numpy() / np.maximum(dv["alpha"].numpy(), 1e-12)
        seen = _bilinear(depth_v[..., None], np.where(mask[..., None], flow, 0.0))[..., 0]
        mask &= np.abs(seen - z) <= DEPTH_TOL * np.abs(z)
    return FlowField(flow, mask)


def analytic_flow(scene, fld, head, cam_v: Camera, t_v, cam_ref: Camera, t_ref) -> FlowField:
    """Flow from the trained deformation model: reference view (``cam_ref``, ``t_ref``) into (``cam_v``, ``t_v``)."""
    if not isinstance(scene, (GaussianScene, GaussianParams)) or len(scene) == 0:
        raise UsageError("analytic flow needs a trained, non-empty scene")
    if getattr(scene, "features", None) is None:
        raise UsageError("analytic flow needs a trained scene")
    return flow_between(_params_at(scene, fld, head, t_v), cam_v, _params_at(scene, fld, head, t_ref), cam_ref)


def _bilinear(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample ``image`` (H, W, C) at pixel + flow with bilinear weights (float64, border clamp)."""
    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    gx = 2.0 * (xs + flow[..., 0]) / max(w - 1, 1) - 1.0
    gy = 2.0 * (ys + flow[..., 1]) / max(h - 1, 1) - 1.0
    grid = torch.from_numpy(np.stack([gx, gy], -1))[None]
    img = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64)).permute(2, 0, 1)[None]
    out = F.grid_sample(img, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out[0].permute(1, 2, 0).numpy()


def warp(image, flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Backward-warp ``image`` onto the flow's reference grid; mask adds the in-bounds test."""
    img = np.asarray(image.detach().numpy() if isinstance(image, torch.Tensor) else image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    if img.shape[:2] != flow.shape:
        raise UsageError(f"image {img.shape[:2]} and flow {flow.shape} sizes differ")
    h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx, sy = xs + flow.flow[..., 0], ys + flow.flow[..., 1]
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    out = _bilinear(img, flow.flow)
    return (out[..., 0] if squeeze else out), flow.mask & inside


def _as_np(x) -> np.ndarray:
    return np.asarray(x.detach().numpy() if isinstance(x, torch.Tensor) else x, dtype=np.float64)


def warped_rmse(O_ref, O_other, flow: FlowField) -> float:
    """RMSE between the reference image and the other image warped onto it, over valid pixels."""
    ref = _as_np(O_ref)
    warped, mask = warp(O_other, flow)
    if ref.shape != warped.shape:
        raise UsageError("images differ in shape")
    if not mask.any():
        raise UsageError("flow mask is empty")
    diff = (ref - warped) ** 2
    if diff.ndim == 3:
        diff = diff.mean(-1)
    return float(math.sqrt(diff[mask].mean()))


def warped_perceptual(O_ref, O_other, flow: FlowField, codec: FeatureCodec) -> float:
    """Encoder feature distance between the reference and the warped other image.

    Invalid pixels are zeroed in both images and the mask, average-pooled to feature
    resolution, weights the per-position distance.
    """
    ref = _as_np(O_ref)
    warped, mask = warp(O_other, flow)
    if not mask.any():
        raise UsageError("flow mask is empty")
    m = mask[..., None].astype(np.float64)
    fa = codec.encode((ref * m).astype(np.float32))
    fb = codec.encode((warped * m).astype(np.float32))
    k = codec.downsample
    weights = F.avg_pool2d(torch.from_numpy(mask.astype(np.float64))[None, None], k)[0, 0] if k > 1 \
        else torch.from_numpy(mask.astype(np.float64))
    return feature_distance(fa, fb, weights)


# ----------------------------------------------------------------------- renderers

def render_content(scene, fld, head, cam, t):
    """Unstylized pooled feature map, RGB and alpha at (cam, t)."""
    with torch.no_grad():
        params = deform_scene(scene, fld, head, t)
        return render(params, cam)


def stylize_ours(scene, fld, head, cam, t, style: StyleCode, rs: RunningStats, codec: FeatureCodec,
                 transform: StyleTransform | None = None):
    return render_stylized(scene, fld, head, cam, t, style, rs, codec, transform=transform).numpy()


def stylize_naive(scene, fld, head, cam, t, style: StyleCode, codec: FeatureCodec):
    """Per-Gaussian AdaIN whose content statistics come from the current frame only."""
    with torch.no_grad():
        params = deform_scene(scene, fld, head, t)
        pooled = pool_features(render(params, cam)["features"], codec.downsample)
        frame_stats = compute_stats(pooled)
        rs = RunningStats(frame_stats.mean, frame_stats.std, update_count=1)
        styled = stylize_gaussians(params, rs, style)
        out = pool_features(render(styled, cam)["features"], codec.downsample)
        return codec.decode(out).numpy()


def stylize_pixel(scene, fld, head, cam, t, style: StyleCode, codec: FeatureCodec):
    """Image-space baseline: render RGB, encode, AdaIN with the frame's own statistics, decode."""
    with torch.no_grad():
        params = deform_scene(scene, fld, head, t)
        rgb = render(params, cam, with_features=False)["color"]
        f = codec.encode(rgb.float().numpy())
        return codec.decode(adain_map(f, compute_stats(f), style.stats)).numpy()


METHODS = ("ours", "naive", "pixel")


def stylize_frame(method, scene, fld, head, cam, t, style, rs, codec, transform=None):
    if method == "ours":
        return stylize_ours(scene, fld, head, cam, t, style, rs, codec, transform)
    if method == "naive":
        return stylize_naive(scene, fld, head, cam, t, style, codec)
    if method == "pixel":
        return stylize_pixel(scene, fld, head, cam, t, style, codec)
    raise UsageError(f"unknown method {method!r}; choose from {METHODS}")


# ----------------------------------------------------------------------- protocol

@dataclass
class ConsistencyProtocol:
    """Which view pairs to compare.

    fixed-camera: frames (k, k+1) are short range, (k, k+long_gap) long range, on each
    camera in ``cameras`` (default: all). fixed-time: the camera nearest the reference
    (short) and the farthest one (long) are compared against ``reference_camera`` at
    every ``time_stride``-th timestamp.
    """

    axes: tuple = ("fixed-camera", "fixed-time")
    ranges: tuple = ("short", "long")
    cameras: tuple | None = None
    reference_camera: int = 0
    long_gap: int = 7
    time_stride: int = 1
    methods: tuple = ("ours",)

    def to_dict(self):
        return asdict(self)


@dataclass
class ConsistencyReport:
    axis: str
    range: str
    wrmse: float
    wperceptual: float
    pairs: int
    style: str
    method: str = "ours"
    dropped: int = 0

    def __post_init__(self):
        if self.wrmse < 0 or self.wperceptual < 0:
            raise UsageError("consistency metrics must be non-negative")
        if self.pairs < 1:
            raise UsageError("a report needs at least one pair")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["wrmse_x1e3"] = self.wrmse * SCALE
        d["wperceptual_x1e3"] = self.wperceptual * SCALE
        return d


def protocol_pairs(cameras: list[Camera], times: list[float], protocol: ConsistencyProtocol):
    """{(axis, range): [((cam_ref, t_ref), (cam_other, t_other)), ...]} in a fixed order."""
    n_cam, n_t = len(cameras), len(times)
    pairs = {}
    if "fixed-camera" in protocol.axes:
        if n_t < 2:
            raise UsageError("the fixed-camera axis needs at least two frames")
        cams = list(range(n_cam)) if protocol.cameras is None else list(protocol.cameras)
        gaps = {"short": 1, "long": int(protocol.long_gap)}
        for rng in protocol.ranges:
            g = gaps[rng]
            if g >= n_t:
                continue
            pairs[("fixed-camera", rng)] = [((c, times[k]), (c, times[k + g])) for c in cams for k in range(n_t - g)]
    if "fixed-time" in protocol.axes:
        if n_cam < 2:
            raise UsageError("the fixed-time axis needs at least two cameras")
        ref = int(protocol.reference_camera)
        if not 0 <= ref < n_cam:
            raise UsageError(f"reference camera {ref} does not exist")
        centers = np.stack([c.center for c in cameras])
        dist = np.linalg.norm(centers - centers[ref], axis=1)
        dist[ref] = np.nan
        others = {"short": int(np.nanargmin(dist)), "long": int(np.nanargmax(dist))}
        ts = times[:: max(int(protocol.time_stride), 1)]
        for rng in protocol.ranges:
            pairs[("fixed-time", rng)] = [((ref, t), (others[rng], t)) for t in ts]
    return pairs


def consistency_suite(scene, fld, head, rs: RunningStats, codec: FeatureCodec, cameras: list[Camera],
                      times: list[float], styles: dict[str, StyleCode], protocol: ConsistencyProtocol | None = None,
                      log_path=None) -> list[ConsistencyReport]:
    """Per-style and style-averaged reports for every (method, axis, range).

    Pairs whose mask is empty are dropped and counted. Aggregation runs in fixed pair order.
    """
    protocol = protocol or ConsistencyProtocol()
    if len(styles) < 2:
        raise UsageError("the consistency suite needs at least two styles")
    if rs is None or not rs.initialized:
        raise UsageError("the consistency suite needs a scene trained with features")
    pairs = protocol_pairs(cameras, list(times), protocol)
    flows = {}
    for key, plist in pairs.items():
        for (ca, ta), (cb, tb) in plist:
            if (ca, ta, cb, tb) not in flows:
                flows[(ca, ta, cb, tb)] = analytic_flow(scene, fld, head, cameras[cb], tb, cameras[ca], ta)
    reports = []
    for method in protocol.methods:
        for sname in sorted(styles):
            cache = {}
            # coefficients depend on (running stats, style) only: built once per style
            transform = StyleTransform.from_stats(rs, styles[sname]) if method == "ours" else None

            def frame(c, t):
                if (c, t) not in cache:
                    cache[(c, t)] = stylize_frame(method, scene, fld, head, cameras[c], t, styles[sname], rs, codec,
                                                  transform)
                return cache[(c, t)]

            for (axis, rng), plist in pairs.items():
                rm, pm, dropped = [], [], 0
                for (ca, ta), (cb, tb) in plist:
                    fl = flows[(ca, ta, cb, tb)]
                    ref, other = frame(ca, ta), frame(cb, tb)
                    if not warp(other, fl)[1].any():
                        dropped += 1
                        continue
                    rm.append(warped_rmse(ref, other, fl))
                    pm.append(warped_perceptual(ref, other, fl, codec))
                if rm:
                    reports.append(ConsistencyReport(axis, rng, float(np.mean(rm)), float(np.mean(pm)), len(rm),
                                                     sname, method, dropped))
    reports += average_reports(reports)
    if log_path is not None:
        with open(log_path, "w") as f:
            for r in reports:
                f.write(json.dumps(r.as_dict(), sort_keys=True) + "\n")
    return reports


def average_reports(reports: list[ConsistencyReport]) -> list[ConsistencyReport]:
    groups = {}
    for r in reports:
        if r.style == "mean":
            continue
        groups.setdefault((r.method, r.axis, r.range), []).append(r)
    out = []
    for (method, axis, rng), rs in groups.items():
        out.append(ConsistencyReport(axis, rng, float(np.mean([r.wrmse for r in rs])),
                                     float(np.mean([r.wperceptual for r in rs])), sum(r.pairs for r in rs),
                                     "mean", method, sum(r.dropped for r in rs)))
    return out


def format_table(reports: list[ConsistencyReport]) -> str:
    """Rows = method; columns = axis x range x (warped RMSE, warped perceptual), all x1e3."""
    means = [r for r in reports if r.style == "mean"]
    cols = [(a, r) for a in ("fixed-camera", "fixed-time") for r in ("short", "long")
            if any(m.axis == a and m.range == r for m in means)]
    header = ["method"] + [f"{a}/{r} {m}" for a, r in cols for m in ("rmse", "perc")]
    rows = []
    for method in dict.fromkeys(m.method for m in means):
        row = [method]
        for a, r in cols:
            hit = [m for m in means if m.method == method and m.axis == a and m.range == r]
            row += [f"{hit[0].wrmse * SCALE:.2f}", f"{hit[0].wperceptual * SCALE:.2f}"] if hit else ["-", "-"]
        rows.append(row)
    widths = [max(len(x[i]) for x in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(v.ljust(w) for v, w in zip(r, widths))
    lines = ["(all values x1e3; lower is better)", fmt(header), fmt(["-" * w for w in widths])]
    return "\n".join(lines + [fmt(r) for r in rows])

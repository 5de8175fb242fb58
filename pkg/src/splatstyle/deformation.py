"""Time-conditioned deformation: a hexplane feature field decoded by a small MLP."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import UsageError
from .scene import GaussianParams

PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))  # xy xz yz xt yt zt


def check_time(t) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise UsageError(f"timestamp {t} outside [0, 1]")
    return t


class HexPlaneField(nn.Module):
    """Six 2D feature planes per resolution level.

    Positions are normalized to [-1, 1] with ``bounds`` (2x3 min/max) and clamped at
    the border; time in [0, 1] spans the temporal axis. Features of the six planes are
    multiplied elementwise, levels are concatenated.
    """

    def __init__(self, bounds, plane_dim=16, resolutions=((16, 8), (32, 16)), seed=0, dtype=torch.float32):
        super().__init__()
        bounds = np.asarray(bounds, dtype=np.float64)
        if bounds.shape != (2, 3) or np.any(bounds[1] <= bounds[0]):
            raise UsageError("bounds must be a 2x3 array of (min, max) with max > min")
        self.register_buffer("lo", torch.as_tensor(bounds[0], dtype=dtype))
        self.register_buffer("hi", torch.as_tensor(bounds[1], dtype=dtype))
        self.plane_dim = int(plane_dim)
        self.resolutions = [tuple(int(v) for v in r) for r in resolutions]
        gen = torch.Generator().manual_seed(seed)
        self.levels = nn.ModuleList()
        for spatial, temporal in self.resolutions:
            planes = nn.ParameterList()
            for a, b in PLANE_AXES:
                size_a = temporal if a == 3 else spatial
                size_b = temporal if b == 3 else spatial
                if b == 3:
                    init = torch.ones(1, plane_dim, size_b, size_a, dtype=dtype)
                else:
                    init = torch.empty(1, plane_dim, size_b, size_a, dtype=dtype).uniform_(0.1, 0.5, generator=gen)
                planes.append(nn.Parameter(init))
            self.levels.append(planes)

    @property
    def out_dim(self) -> int:
        return self.plane_dim * len(self.resolutions)

    def normalize(self, positions: torch.Tensor, t) -> torch.Tensor:
        xyz = 2.0 * (positions - self.lo) / (self.hi - self.lo) - 1.0
        tt = torch.full_like(xyz[:, :1], 2.0 * float(t) - 1.0)
        return torch.cat([xyz, tt], -1).clamp(-1.0, 1.0)

    def forward(self, positions: torch.Tensor, t) -> torch.Tensor:
        coords = self.normalize(positions, t)
        out = []
        for planes in self.levels:
            fused = 1.0
            for plane, (a, b) in zip(planes, PLANE_AXES):
                grid = coords[:, (a, b)].view(1, -1, 1, 2)
                sampled = F.grid_sample(plane, grid, mode="bilinear", padding_mode="border", align_corners=True)
                fused = fused * sampled.view(self.plane_dim, -1).T
            out.append(fused)
        return torch.cat(out, -1)


def sample_field(field: HexPlaneField, position, t) -> torch.Tensor:
    """Fused field features at one position (3,) or many (N, 3)."""
    t = check_time(t)
    p = torch.as_tensor(position, dtype=field.lo.dtype)
    single = p.dim() == 1
    out = field(p.view(-1, 3), t)
    return out[0] if single else out


class DeformationHead(nn.Module):
    """MLP from field features to (d_mean, d_rotation, d_log_scale); last layer starts at zero."""

    def __init__(self, in_dim, hidden=64, n_hidden=2, seed=0, dtype=torch.float32):
        super().__init__()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        layers = []
        width = in_dim
        for _ in range(n_hidden):
            layers += [nn.Linear(width, hidden, dtype=dtype), nn.ReLU()]
            width = hidden
        self.body = nn.Sequential(*layers)
        self.out = nn.Linear(width, 10, dtype=dtype)
        torch.random.set_rng_state(gen_state)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, h):
        d = self.out(self.body(h))
        return d[:, :3], d[:, 3:7], d[:, 7:10]


@dataclass
class DeformationCache:
    canonical: GaussianParams
    deformed: GaussianParams
    inputs: dict
    consumed: bool = False


def deform_scene(scene, field: HexPlaneField | None, head: DeformationHead | None, t,
                 deform_rotation_scale: bool = True, return_cache: bool = False):
    """Gaussians at time ``t``: mean + d_mean, raw quaternion + d_q, log-scale + d_s.

    Opacity, color and feature stay canonical. Rotations are returned unnormalized;
    consumers normalize (``GaussianParams.unit_rotations``). With ``return_cache`` the
    autograd graph is kept for ``deformation_backward``.
    """
    t = check_time(t)
    canonical = scene if isinstance(scene, GaussianParams) else GaussianParams.from_scene(scene)
    if field is None or head is None:
        deformed = canonical
    else:
        h = field(canonical.means, t)
        d_mean, d_rot, d_scale = head(h)
        changes = {"means": canonical.means + d_mean}
        if deform_rotation_scale:
            changes["rotations"] = canonical.rotations + d_rot
            changes["log_scales"] = canonical.log_scales + d_scale
        deformed = canonical.replace(**changes)
    if not return_cache:
        return deformed
    inputs = {
        "means": canonical.means,
        "rotations": canonical.rotations,
        "log_scales": canonical.log_scales,
    }
    if field is not None:
        inputs.update({f"field.{k}": v for k, v in field.named_parameters()})
    if head is not None:
        inputs.update({f"head.{k}": v for k, v in head.named_parameters()})
    return deformed, DeformationCache(canonical, deformed, inputs)


def deformation_backward(cache: DeformationCache | None, grad_means=None, grad_rotations=None, grad_log_scales=None) -> dict:
    """Reverse-mode gradients of ``deform_scene`` for the given upstream gradients.

    Returns a dict keyed like ``cache.inputs`` (canonical means/rotations/log-scales,
    ``field.*`` grids and ``head.*`` weights). Each cache can be consumed once.
    """
    if cache is None or cache.consumed:
        raise UsageError("deformation_backward needs an unconsumed forward cache (deform_scene(..., return_cache=True))")
    outs, grads = [], []
    for name, g in (("means", grad_means), ("rotations", grad_rotations), ("log_scales", grad_log_scales)):
        out = getattr(cache.deformed, name)
        if g is None or not out.requires_grad:
            continue
        outs.append(out)
        grads.append(torch.as_tensor(g, dtype=out.dtype))
    names = [k for k, v in cache.inputs.items() if v.requires_grad]
    tensors = [cache.inputs[k] for k in names]
    cache.consumed = True
    if not outs:
        return {k: torch.zeros_like(v) for k, v in cache.inputs.items()}
    result = torch.autograd.grad(outs, tensors, grads, allow_unused=True)
    out = {k: torch.zeros_like(v) for k, v in cache.inputs.items()}
    for k, g in zip(names, result):
        if g is not None:
            out[k] = g
    return out

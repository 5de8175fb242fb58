"""EWA projection of 3D Gaussians to screen-space splats."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..scene import Camera, Gaussian, build_covariance

LOW_PASS = 0.3
FRUSTUM_GUARD = 1.3


@dataclass
class SplatProjection:
    mean2d: np.ndarray
    conic: np.ndarray
    depth: float
    radius: float
    gaussian_index: int

    @property
    def cov2d(self) -> np.ndarray:
        a, b, c = self.conic
        return np.linalg.inv(np.array([[a, b], [b, c]]))


def project_gaussians(means, cov3d, cam: Camera):
    """Differentiable projection of N Gaussians.

    Returns a dict with ``mean2d`` (N, 2), ``cov2d`` (N, 2, 2), ``conic`` (N, 3),
    ``depth`` (N,), and the non-differentiable ``radius`` (N,) and ``visible`` (N,) mask.
    Culled splats keep finite (but unused) values.
    """
    dtype = means.dtype
    R = torch.as_tensor(cam.R, dtype=dtype)
    T = torch.as_tensor(cam.T, dtype=dtype)
    p = means @ R.T + T
    z = p[:, 2]
    tanx, tany = cam.tan_half_fov
    with torch.no_grad():
        visible = (z > cam.near) & (z < cam.far)
        zs = torch.where(visible, z, torch.ones_like(z))
        visible &= (p[:, 0] / zs).abs() <= FRUSTUM_GUARD * tanx
        visible &= (p[:, 1] / zs).abs() <= FRUSTUM_GUARD * tany
    # culled splats get a dummy depth so the Jacobian stays finite
    zsafe = torch.where(visible, z, torch.ones_like(z))
    x, y = p[:, 0], p[:, 1]
    mean2d = torch.stack([cam.fx * x / zsafe + cam.cx, cam.fy * y / zsafe + cam.cy], -1)
    zero = torch.zeros_like(z)
    J = torch.stack(
        [
            torch.stack([cam.fx / zsafe, zero, -cam.fx * x / zsafe**2], -1),
            torch.stack([zero, cam.fy / zsafe, -cam.fy * y / zsafe**2], -1),
        ],
        -2,
    )
    JW = J @ R
    cov2d = JW @ cov3d @ JW.transpose(-1, -2) + LOW_PASS * torch.eye(2, dtype=dtype)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], -1)
    with torch.no_grad():
        mid = 0.5 * (a + c)
        lam_max = mid + torch.sqrt((mid * mid - det).clamp_min(0.0))
        radius = torch.where(visible, 3.0 * torch.sqrt(lam_max), torch.zeros_like(lam_max))
    return {
        "mean2d": mean2d,
        "cov2d": cov2d,
        "conic": conic,
        "depth": z,
        "radius": radius.detach(),
        "visible": visible,
    }


def project_gaussian(g: Gaussian, cam: Camera, index: int = 0) -> SplatProjection | None:
    """Project one Gaussian; ``None`` when it is culled."""
    means = torch.as_tensor(np.asarray(g.mean, dtype=np.float64))[None]
    cov = build_covariance(
        torch.as_tensor(np.asarray(g.rotation, dtype=np.float64))[None],
        torch.as_tensor(np.asarray(g.log_scale, dtype=np.float64))[None],
    )
    out = project_gaussians(means, cov, cam)
    if not bool(out["visible"][0]):
        return None
    return SplatProjection(
        mean2d=out["mean2d"][0].detach().numpy(),
        conic=out["conic"][0].detach().numpy(),
        depth=float(out["depth"][0]),
        radius=float(out["radius"][0]),
        gaussian_index=index,
    )

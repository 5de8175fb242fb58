"""Canonical Gaussian scene: parameterization, activations and covariance."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import DegenerateCovarianceError, InvalidParameterError, UsageError

SCALE_FLOOR = 1e-7

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def inverse_sigmoid(x):
    x = torch.as_tensor(x)
    return torch.log(x / (1 - x))


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def rgb_to_sh(rgb):
    return (rgb - 0.5) / SH_C0


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices for quaternions in (w, x, y, z) order, shape (..., 4) -> (..., 3, 3).

    The input is normalized first, so raw (unnormalized) parameters are accepted.
    """
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], -2)


def activate_scale(log_scale: torch.Tensor) -> torch.Tensor:
    return torch.exp(log_scale).clamp_min(SCALE_FLOOR)


def build_covariance(rotation: torch.Tensor, log_scale: torch.Tensor) -> torch.Tensor:
    """Batched Sigma = R S S^T R^T."""
    R = quaternion_to_matrix(rotation)
    M = R * activate_scale(log_scale)[..., None, :]
    return M @ M.transpose(-1, -2)


def covariance_from_params(rotation, log_scale) -> np.ndarray:
    """3x3 covariance of a single Gaussian from its quaternion and log-scale."""
    q = np.asarray(rotation, dtype=np.float64)
    s = np.asarray(log_scale, dtype=np.float64)
    if q.shape != (4,) or s.shape != (3,):
        raise InvalidParameterError("expected a 4-vector quaternion and a 3-vector log-scale")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(s))):
        raise InvalidParameterError("non-finite Gaussian parameters")
    if np.linalg.norm(q) == 0:
        raise InvalidParameterError("zero quaternion")
    return build_covariance(torch.from_numpy(q), torch.from_numpy(s)).numpy()


def eval_sh(degree: int, sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Evaluate real SH with coefficients (..., K, 3) along unit directions (..., 3)."""
    result = SH_C0 * sh[..., 0, :]
    if degree < 1:
        return result
    x, y, z = (dirs[..., i : i + 1] for i in range(3))
    result = result - SH_C1 * y * sh[..., 1, :] + SH_C1 * z * sh[..., 2, :] - SH_C1 * x * sh[..., 3, :]
    if degree < 2:
        return result
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    result = (
        result
        + SH_C2[0] * xy * sh[..., 4, :]
        + SH_C2[1] * yz * sh[..., 5, :]
        + SH_C2[2] * (2.0 * zz - xx - yy) * sh[..., 6, :]
        + SH_C2[3] * xz * sh[..., 7, :]
        + SH_C2[4] * (xx - yy) * sh[..., 8, :]
    )
    if degree < 3:
        return result
    return (
        result
        + SH_C3[0] * y * (3 * xx - yy) * sh[..., 9, :]
        + SH_C3[1] * xy * z * sh[..., 10, :]
        + SH_C3[2] * y * (4 * zz - xx - yy) * sh[..., 11, :]
        + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[..., 12, :]
        + SH_C3[4] * x * (4 * zz - xx - yy) * sh[..., 13, :]
        + SH_C3[5] * z * (xx - yy) * sh[..., 14, :]
        + SH_C3[6] * x * (xx - 3 * yy) * sh[..., 15, :]
    )


def sh_to_color(coeffs, view_direction) -> np.ndarray:
    """RGB in [0, 1] for one Gaussian's SH coefficients (K, 3) seen along ``view_direction``."""
    coeffs = torch.as_tensor(np.asarray(coeffs, dtype=np.float64))
    d = torch.as_tensor(np.asarray(view_direction, dtype=np.float64))
    degree = int(round(np.sqrt(coeffs.shape[0]))) - 1
    if num_sh_coeffs(degree) != coeffs.shape[0] or degree > 3:
        raise InvalidParameterError(f"{coeffs.shape[0]} SH coefficients is not a supported degree")
    return (eval_sh(degree, coeffs, d) + 0.5).clamp(0.0, 1.0).numpy()


@dataclass
class Gaussian:
    mean: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color_coeffs: np.ndarray
    feature: np.ndarray

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))

    @property
    def scale(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_scale), SCALE_FLOOR)

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from_params(self.rotation, self.log_scale)


def gaussian_density(g: Gaussian, x) -> float:
    """Unnormalized density exp(-1/2 d^T Sigma^-1 d) with d = x - mean."""
    cov = g.covariance
    if np.linalg.cond(cov) * np.finfo(np.float64).eps >= 1.0:
        raise DegenerateCovarianceError("covariance is numerically singular")
    d = np.asarray(x, dtype=np.float64) - np.asarray(g.mean, dtype=np.float64)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError("covariance is not positive definite") from exc
    if np.min(np.diag(L)) <= 0 or not np.all(np.isfinite(L)):
        raise DegenerateCovarianceError("covariance is singular")
    y = np.linalg.solve(L, d)
    return float(np.exp(-0.5 * y @ y))


@dataclass
class Camera:
    """Pinhole camera. Pixel centers sit at integer coordinates (column, row)."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    T: np.ndarray
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0
    source_c2w: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not self.near < self.far:
            raise InvalidParameterError("near plane must be closer than far plane")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise InvalidParameterError("image size must be positive")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-9:
            raise InvalidParameterError("world-to-camera rotation is not orthonormal")
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.T

    @property
    def tan_half_fov(self) -> tuple[float, float]:
        return self.width / (2.0 * self.fx), self.height / (2.0 * self.fy)

    def world_to_camera(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.T
        return M

    def camera_to_world(self) -> np.ndarray:
        if self.source_c2w is not None:
            return self.source_c2w.copy()
        M = np.eye(4)
        M[:3, :3] = self.R.T
        M[:3, 3] = -self.R.T @ self.T
        return M

    @classmethod
    def from_camera_to_world(cls, c2w, fx, fy, cx, cy, width, height, near=0.01, far=100.0, tol=1e-9):
        c2w = np.asarray(c2w, dtype=np.float64)
        Rc = c2w[:3, :3]
        if np.abs(Rc @ Rc.T - np.eye(3)).max() > tol:
            raise InvalidParameterError("camera-to-world rotation is not rigid")
        if np.abs(Rc @ Rc.T - np.eye(3)).max() > 1e-10:
            # loaded cameras must satisfy the strict orthonormality invariant
            u, _, vt = np.linalg.svd(Rc)
            Rc = u @ vt
        R = Rc.T
        T = -R @ c2w[:3, 3]
        return cls(fx, fy, cx, cy, R, T, width, height, near, far, source_c2w=c2w.copy())

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, near=0.01, far=100.0):
        """Camera at ``eye`` looking at ``target``; camera x right, y down, z forward."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0, R, -R @ eye, width, height, near, far)

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and camera-space depth of world points (N, 3)."""
        p = np.asarray(points, dtype=np.float64) @ self.R.T + self.T
        z = p[:, 2]
        uv = np.stack([self.fx * p[:, 0] / z + self.cx, self.fy * p[:, 1] / z + self.cy], -1)
        return uv, z


class GaussianScene:
    """A set of canonical Gaussians stored as raw (pre-activation) torch parameters.

    Parameters live as ``nn.Parameter`` attributes so an optimizer can hold them,
    following the usual splatting code layout. Quaternions are (w, x, y, z).
    """

    def __init__(self, feature_dim: int = 32, sh_degree: int = 0, background=(0.0, 0.0, 0.0), dtype=torch.float32):
        if feature_dim <= 0:
            raise InvalidParameterError("feature_dim must be positive")
        if not 0 <= sh_degree <= 3:
            raise InvalidParameterError("sh_degree must be in [0, 3]")
        bg = np.asarray(background, dtype=np.float64)
        if bg.shape != (3,) or bg.min() < 0 or bg.max() > 1:
            raise InvalidParameterError("background color must be an RGB triple in [0, 1]")
        self.feature_dim = int(feature_dim)
        self.sh_degree = int(sh_degree)
        self.background = bg
        self.dtype = dtype
        self.means = nn.Parameter(torch.empty(0, 3, dtype=dtype))
        self.rotations = nn.Parameter(torch.empty(0, 4, dtype=dtype))
        self.log_scales = nn.Parameter(torch.empty(0, 3, dtype=dtype))
        self.opacity_logits = nn.Parameter(torch.empty(0, dtype=dtype))
        self.sh = nn.Parameter(torch.empty(0, num_sh_coeffs(sh_degree), 3, dtype=dtype))
        self.features = nn.Parameter(torch.empty(0, feature_dim, dtype=dtype))

    PARAM_NAMES = ("means", "rotations", "log_scales", "opacity_logits", "sh", "features")

    @classmethod
    def from_arrays(cls, means, rotations, log_scales, opacity_logits, sh, features, sh_degree=None, background=(0, 0, 0), dtype=torch.float32):
        features = np.asarray(features)
        sh = np.asarray(sh)
        if sh_degree is None:
            sh_degree = int(round(np.sqrt(sh.shape[1]))) - 1
        scene = cls(feature_dim=features.shape[1], sh_degree=sh_degree, background=background, dtype=dtype)
        n = len(np.asarray(means))
        values = dict(means=means, rotations=rotations, log_scales=log_scales, opacity_logits=opacity_logits, sh=sh, features=features)
        for name, value in values.items():
            t = torch.as_tensor(np.asarray(value), dtype=dtype).clone()
            if t.shape[0] != n:
                raise InvalidParameterError(f"{name} has {t.shape[0]} rows, expected {n}")
            setattr(scene, name, nn.Parameter(t))
        scene.validate()
        return scene

    @classmethod
    def create_random(cls, n, bbox, feature_dim=32, sh_degree=0, seed=0, init_opacity=0.1, background=(0, 0, 0), dtype=torch.float32):
        """Uniform random points in ``bbox`` (2x3 min/max) with nearest-neighbour isotropic scales."""
        rng = np.random.default_rng(seed)
        bbox = np.asarray(bbox, dtype=np.float64)
        means = rng.uniform(bbox[0], bbox[1], size=(n, 3))
        colors = rng.uniform(0.0, 1.0, size=(n, 3))
        return cls.from_points(means, colors, feature_dim, sh_degree, init_opacity, background, dtype)

    @classmethod
    def from_points(cls, points, colors, feature_dim=32, sh_degree=0, init_opacity=0.1, background=(0, 0, 0), dtype=torch.float32):
        points = np.asarray(points, dtype=np.float64)
        n = len(points)
        if n == 0:
            raise InvalidParameterError("cannot initialize an empty scene")
        nn_dist = _mean_knn_distance(points, k=3)
        log_scales = np.repeat(np.log(np.maximum(nn_dist, 1e-7))[:, None], 3, axis=1)
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
        sh = np.zeros((n, num_sh_coeffs(sh_degree), 3))
        sh[:, 0] = rgb_to_sh(np.asarray(colors, dtype=np.float64))
        opacity = np.full(n, np.log(init_opacity / (1 - init_opacity)))
        features = np.zeros((n, feature_dim))
        return cls.from_arrays(points, rotations, log_scales, opacity, sh, features, sh_degree, background, dtype)

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def num_gaussians(self) -> int:
        return len(self)

    def parameters(self) -> dict[str, nn.Parameter]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    @property
    def opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def scales(self) -> torch.Tensor:
        return activate_scale(self.log_scales)

    @property
    def unit_rotations(self) -> torch.Tensor:
        return self.rotations / self.rotations.norm(dim=-1, keepdim=True)

    def covariances(self) -> torch.Tensor:
        return build_covariance(self.rotations, self.log_scales)

    @torch.no_grad()
    def normalize_rotations_(self):
        self.rotations.data /= self.rotations.data.norm(dim=-1, keepdim=True)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i].detach().double().numpy(),
            rotation=self.rotations[i].detach().double().numpy(),
            log_scale=self.log_scales[i].detach().double().numpy(),
            opacity_logit=float(self.opacity_logits[i]),
            color_coeffs=self.sh[i].detach().double().numpy(),
            feature=self.features[i].detach().double().numpy(),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name).detach().cpu().numpy().copy() for name in self.PARAM_NAMES}

    def copy(self, dtype=None) -> GaussianScene:
        return GaussianScene.from_arrays(
            **self.arrays(), sh_degree=self.sh_degree, background=self.background, dtype=dtype or self.dtype
        )

    def validate(self):
        if len(self) == 0:
            raise UsageError("scene has no Gaussians")
        if self.features.shape[1] != self.feature_dim:
            raise UsageError("feature_dim mismatch")
        for name in self.PARAM_NAMES:
            if not torch.isfinite(getattr(self, name)).all():
                raise InvalidParameterError(f"non-finite values in {name}")


def _mean_knn_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    pts = torch.from_numpy(points)
    n = len(points)
    if n == 1:
        return np.full(1, 0.01)
    k = min(k, n - 1)
    out = np.empty(n)
    # chunked to bound the distance matrix size
    for start in range(0, n, 2048):
        d = torch.cdist(pts[start : start + 2048], pts)
        d[torch.arange(d.shape[0]), torch.arange(start, start + d.shape[0])] = float("inf")
        out[start : start + 2048] = d.topk(k, largest=False).values.mean(1).numpy()
    return out


@dataclass
class GaussianParams:
    """Per-frame Gaussian parameters as tensors (possibly deformed, possibly graph-attached)."""

    means: torch.Tensor
    rotations: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    sh: torch.Tensor
    features: torch.Tensor
    sh_degree: int = 0
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    FIELDS = ("means", "rotations", "log_scales", "opacity_logits", "sh", "features")

    @classmethod
    def from_scene(cls, scene: GaussianScene) -> GaussianParams:
        return cls(
            scene.means, scene.rotations, scene.log_scales, scene.opacity_logits,
            scene.sh, scene.features, scene.sh_degree, scene.background,
        )

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def unit_rotations(self) -> torch.Tensor:
        return self.rotations / self.rotations.norm(dim=-1, keepdim=True)

    def replace(self, **changes) -> GaussianParams:
        values = {name: getattr(self, name) for name in self.FIELDS}
        values.update(changes)
        return GaussianParams(**values, sh_degree=self.sh_degree, background=self.background)

"""Seeded synthetic dynamic scenes: textured Gaussian blobs on smooth trajectories."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from ..errors import InvalidParameterError
from ..rasterizer.render import render
from ..scene import Camera, GaussianParams, GaussianScene, rgb_to_sh
from .images import write_image
from .manifest import DatasetManifest, Frame, load_dataset

GROUND_TRUTH_NAME = "ground_truth.npz"

PALETTE = np.array([
    [0.90, 0.25, 0.20],
    [0.20, 0.55, 0.95],
    [0.95, 0.80, 0.20],
    [0.30, 0.85, 0.40],
    [0.80, 0.35, 0.85],
    [0.95, 0.55, 0.15],
])


@dataclass
class SyntheticSpec:
    n_blobs: int = 3
    gaussians_per_blob: int = 200
    n_cameras: int = 4
    n_frames: int = 30
    resolution: int = 64
    blob_radius: float = 0.38
    amplitude: float = 0.3
    camera_distance: float = 4.0
    fov_degrees: float = 50.0
    fps: float = 30.0

    def validate(self):
        for name in ("n_blobs", "gaussians_per_blob", "n_cameras", "n_frames", "resolution"):
            if int(getattr(self, name)) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")
        if self.blob_radius <= 0 or self.camera_distance <= 0 or not 0 < self.fov_degrees < 180:
            raise InvalidParameterError("invalid blob/camera geometry")
        return self


@dataclass
class GroundTruthScene:
    """Canonical blobs plus per-blob sinusoidal translations ``amplitude * sin(2 pi t + phase)``."""

    scene: GaussianScene
    blob_ids: np.ndarray
    amplitudes: np.ndarray  # (B, 3)
    phases: np.ndarray  # (B,)

    def offsets(self, t: float) -> np.ndarray:
        return self.amplitudes * np.sin(2 * np.pi * t + self.phases)[:, None]

    def params_at(self, t: float) -> GaussianParams:
        p = GaussianParams.from_scene(self.scene)
        shift = torch.as_tensor(self.offsets(t)[self.blob_ids], dtype=p.means.dtype)
        return p.replace(means=p.means.detach() + shift)

    def save(self, path):
        np.savez(path, blob_ids=self.blob_ids, amplitudes=self.amplitudes, phases=self.phases,
                 background=self.scene.background, **self.scene.arrays())

    @classmethod
    def load(cls, path) -> GroundTruthScene:
        with np.load(path) as z:
            arrays = {k: z[k] for k in GaussianScene.PARAM_NAMES}
            scene = GaussianScene.from_arrays(**arrays, background=z["background"], dtype=torch.float64)
            return cls(scene, z["blob_ids"], z["amplitudes"], z["phases"])


def synthetic_cameras(spec: SyntheticSpec) -> list[Camera]:
    """Cameras on a sphere around the origin. Camera 0 looks straight down +z and the
    others surround it, so camera 0 is a natural held-out interpolated view."""
    directions = [(0.0, 0.0), (-25.0, 8.0), (25.0, 8.0), (0.0, -22.0), (-40.0, -12.0), (40.0, -12.0)]
    while len(directions) < spec.n_cameras:
        k = len(directions)
        directions.append(((k * 47.0) % 120.0 - 60.0, (k * 29.0) % 50.0 - 25.0))
    res = int(spec.resolution)
    focal = res / (2.0 * np.tan(np.radians(spec.fov_degrees) / 2.0))
    cams = []
    for az, el in directions[: spec.n_cameras]:
        a, e = np.radians(az), np.radians(el)
        eye = spec.camera_distance * np.array([np.sin(a) * np.cos(e), -np.sin(e), -np.cos(a) * np.cos(e)])
        cams.append(Camera.look_at(eye, [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], focal, focal, res, res, near=0.1, far=20.0))
    return cams


def build_ground_truth(seed: int, spec: SyntheticSpec) -> GroundTruthScene:
    rng = np.random.default_rng(seed)
    n_b, n_g = int(spec.n_blobs), int(spec.gaussians_per_blob)
    angles = 2 * np.pi * (np.arange(n_b) / n_b) + rng.uniform(0, 2 * np.pi)
    ring = 0.55 if n_b > 1 else 0.0
    centers = np.stack([ring * np.cos(angles), ring * np.sin(angles), rng.uniform(-0.3, 0.3, n_b)], -1)
    means, colors, blob_ids, log_scales = [], [], [], []
    for b in range(n_b):
        # points uniformly inside an ellipsoid
        d = rng.normal(size=(n_g, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = rng.uniform(0, 1, n_g) ** (1 / 3)
        axes = spec.blob_radius * rng.uniform(0.75, 1.15, 3)
        local = d * r[:, None] * axes
        means.append(centers[b] + local)
        base = PALETTE[b % len(PALETTE)]
        alt = 1.0 - 0.7 * base
        freq = rng.uniform(7.0, 10.0)
        stripe = 0.5 + 0.5 * np.sin(freq * (local @ rng.normal(size=3) / np.sqrt(3)))
        colors.append(base * stripe[:, None] + alt * (1 - stripe[:, None]))
        blob_ids.append(np.full(n_g, b))
        log_scales.append(np.log(spec.blob_radius * 0.22) + rng.uniform(-0.25, 0.15, (n_g, 3)))
    n = n_b * n_g
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    sh = rgb_to_sh(np.concatenate(colors))[:, None, :]
    opacity = np.full(n, np.log(0.9 / 0.1))
    scene = GaussianScene.from_arrays(
        np.concatenate(means), rotations, np.concatenate(log_scales), opacity, sh, np.zeros((n, 1)),
        sh_degree=0, dtype=torch.float64,
    )
    directions = rng.normal(size=(n_b, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    amplitudes = spec.amplitude * directions
    phases = rng.uniform(0, 2 * np.pi, n_b)
    return GroundTruthScene(scene, np.concatenate(blob_ids), amplitudes, phases)


def frame_times(n_frames: int) -> list[float]:
    if n_frames == 1:
        return [0.0]
    return [k / (n_frames - 1) for k in range(n_frames)]


def generate_synthetic(seed: int, out_dir, spec: SyntheticSpec | None = None):
    """Write a dataset (manifest + PNG frames) and the hidden ground-truth scene to ``out_dir``."""
    spec = (spec or SyntheticSpec()).validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt = build_ground_truth(seed, spec)
    cams = synthetic_cameras(spec)
    times = frame_times(int(spec.n_frames))
    frames = []
    with torch.no_grad():
        for c, cam in enumerate(cams):
            for k, t in enumerate(times):
                image = render(gt.params_at(t), cam, with_features=False)["color"].numpy()
                rel = f"frames/cam{c:02d}/{k:04d}.png"
                write_image(out / rel, image)
                frames.append(Frame(c, t, rel))
    extent = spec.blob_radius * 1.2 + 0.55 + spec.amplitude + 0.3
    bounds = np.array([[-extent] * 3, [extent] * 3])
    manifest = DatasetManifest(cams, frames, bounds, spec.fps, [f"cam{c:02d}" for c in range(len(cams))])
    manifest.save(out)
    gt.save(out / GROUND_TRUTH_NAME)
    return out


def load_ground_truth(directory) -> GroundTruthScene:
    return GroundTruthScene.load(Path(directory) / GROUND_TRUTH_NAME)


def spec_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)


__all__ = [
    "SyntheticSpec", "GroundTruthScene", "generate_synthetic", "load_ground_truth", "load_dataset",
    "synthetic_cameras", "build_ground_truth", "frame_times", "codec_corpus", "style_image", "write_style_images",
]


def codec_corpus(seed: int, n_images: int = 200, spec: SyntheticSpec | None = None) -> np.ndarray:
    """In-memory frames from independently seeded synthetic scenes, for codec training."""
    spec = (spec or SyntheticSpec()).validate()
    rng = np.random.default_rng(seed)
    cams = synthetic_cameras(spec)
    images = []
    with torch.no_grad():
        while len(images) < n_images:
            gt = build_ground_truth(int(rng.integers(2**31)), spec)
            for _ in range(min(10, n_images - len(images))):
                cam = cams[int(rng.integers(len(cams)))]
                t = float(rng.uniform())
                images.append(render(gt.params_at(t), cam, with_features=False)["color"].numpy())
    return np.stack(images).astype(np.float32)


def style_image(seed: int, size: int = 64) -> np.ndarray:
    """A seeded procedural texture (H, W, 3) in [0, 1]: oriented waves over a random palette."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / size
    palette = rng.uniform(0.0, 1.0, (3, 3))
    weights = np.zeros((size, size, 3))
    for k in range(3):
        field = np.zeros((size, size))
        for _ in range(3):
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(2.0, 12.0)
            field += np.sin(2 * np.pi * freq * (np.cos(theta) * xs + np.sin(theta) * ys) + rng.uniform(0, 2 * np.pi))
        weights[..., k] = np.exp(rng.uniform(0.5, 2.0) * field)
    weights /= weights.sum(-1, keepdims=True)
    image = weights @ palette
    image += rng.normal(0.0, rng.uniform(0.0, 0.05), image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def write_style_images(seed: int, n: int, out_dir, size: int = 64) -> list[Path]:
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(int(n)):
        path = out / f"style_{i:02d}.png"
        write_image(path, style_image(int(rng.integers(2**31)), size))
        paths.append(path)
    return paths

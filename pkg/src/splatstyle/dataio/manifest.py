"""Multi-view video dataset manifest (versioned JSON) and loader."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DatasetError, InvalidParameterError
from ..scene import Camera
from .images import read_image

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "splatstyle-dataset"
MANIFEST_VERSION = 1
RIGID_TOL = 1e-4


@dataclass
class Frame:
    camera: int
    time: float
    image: str


@dataclass
class DatasetManifest:
    cameras: list[Camera]
    frames: list[Frame]
    bounds: np.ndarray
    fps: float = 30.0
    camera_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        cams = []
        for i, cam in enumerate(self.cameras):
            cams.append({
                "name": self.camera_names[i] if i < len(self.camera_names) else f"cam{i:02d}",
                "width": cam.width,
                "height": cam.height,
                "fx": cam.fx,
                "fy": cam.fy,
                "cx": cam.cx,
                "cy": cam.cy,
                "near": cam.near,
                "far": cam.far,
                "camera_to_world": [float(v) for v in cam.camera_to_world().reshape(-1)],
            })
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "fps": self.fps,
            "bounds": np.asarray(self.bounds, dtype=float).tolist(),
            "cameras": cams,
            "frames": [{"camera": f.camera, "time": f.time, "image": f.image} for f in self.frames],
        }

    @classmethod
    def from_dict(cls, data: dict) -> DatasetManifest:
        if data.get("format") != MANIFEST_FORMAT:
            raise DatasetError("not a splatstyle dataset manifest")
        if data.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest version {data.get('version')}")
        cameras, names = [], []
        for i, c in enumerate(data["cameras"]):
            m = np.asarray(c["camera_to_world"], dtype=np.float64)
            if m.size != 16:
                raise DatasetError(f"camera {i}: camera_to_world must have 16 entries")
            m = m.reshape(4, 4)
            if not np.allclose(m[3], [0, 0, 0, 1]):
                raise DatasetError(f"camera {i}: last matrix row must be (0, 0, 0, 1)")
            try:
                cam = Camera.from_camera_to_world(
                    m, c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"],
                    c.get("near", 0.01), c.get("far", 100.0), tol=RIGID_TOL,
                )
            except InvalidParameterError as exc:
                raise DatasetError(f"camera {i}: {exc}") from exc
            cameras.append(cam)
            names.append(c.get("name", f"cam{i:02d}"))
        frames = []
        for f in data["frames"]:
            t = float(f["time"])
            if not 0.0 <= t <= 1.0:
                raise DatasetError(f"frame {f['image']}: time {t} outside [0, 1]")
            cam = int(f["camera"])
            if not 0 <= cam < len(cameras):
                raise DatasetError(f"frame {f['image']}: unknown camera {cam}")
            frames.append(Frame(cam, t, str(f["image"])))
        last = {}
        for f in frames:
            if f.time < last.get(f.camera, -1.0):
                raise DatasetError(f"frames of camera {f.camera} are not sorted by time")
            last[f.camera] = f.time
        return cls(cameras, frames, np.asarray(data["bounds"], dtype=np.float64), float(data.get("fps", 30.0)), names)

    def save(self, directory):
        path = Path(directory) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @property
    def times(self) -> list[float]:
        return sorted({f.time for f in self.frames})


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray  # (n_frames, H, W, 3) float32 in manifest order; a list if resolutions differ
    root: Path | None = None

    @property
    def cameras(self) -> list[Camera]:
        return self.manifest.cameras

    @property
    def frames(self) -> list[Frame]:
        return self.manifest.frames

    def __len__(self):
        return len(self.manifest.frames)

    def indices(self, cameras=None, exclude_cameras=()) -> list[int]:
        return [
            i for i, f in enumerate(self.frames)
            if (cameras is None or f.camera in cameras) and f.camera not in exclude_cameras
        ]

    def find(self, camera: int, time: float) -> int:
        for i, f in enumerate(self.frames):
            if f.camera == camera and abs(f.time - time) < 1e-9:
                return i
        raise KeyError((camera, time))


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"no {MANIFEST_NAME} in {root}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest: {exc}") from exc
    try:
        manifest = DatasetManifest.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"malformed manifest: {exc!r}") from exc
    images = []
    for f in manifest.frames:
        img = read_image(root / f.image)
        cam = manifest.cameras[f.camera]
        if img.shape[:2] != (cam.height, cam.width):
            raise DatasetError(
                f"{f.image}: resolution {img.shape[1]}x{img.shape[0]} does not match camera {cam.width}x{cam.height}"
            )
        images.append(img)
    if images and len({im.shape for im in images}) == 1:
        images = np.stack(images)
    return Dataset(manifest, images, root)

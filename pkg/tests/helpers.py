"""Small seeded scenes and cameras shared by the unit tests."""
import numpy as np
import torch

from splatstyle.scene import Camera, GaussianParams, GaussianScene, rgb_to_sh


def front_camera(width=32, height=32, focal=None, near=0.01, far=100.0):
    """Camera at the origin looking down +z."""
    focal = focal or float(width)
    return Camera(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, np.eye(3), np.zeros(3), width, height, near, far)


def random_quaternions(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_scene(seed, n=20, feature_dim=4, sh_degree=0, dtype=torch.float64, depth=(3.0, 6.0),
                 scale=(0.05, 0.3), spread=1.0, background=(0.0, 0.0, 0.0)):
    rng = np.random.default_rng(seed)
    means = np.column_stack([
        rng.uniform(-spread, spread, n),
        rng.uniform(-spread, spread, n),
        rng.uniform(*depth, n),
    ])
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0] = rgb_to_sh(rng.uniform(0.05, 0.95, (n, 3)))
    if sh_degree > 0:
        sh[:, 1:] = rng.normal(0, 0.1, sh[:, 1:].shape)
    return GaussianScene.from_arrays(
        means,
        random_quaternions(rng, n),
        np.log(rng.uniform(*scale, (n, 3))),
        rng.normal(0.0, 1.5, n),
        sh,
        rng.normal(0.0, 1.0, (n, feature_dim)),
        sh_degree=sh_degree,
        background=background,
        dtype=dtype,
    )


def params_of(scene) -> GaussianParams:
    return GaussianParams.from_scene(scene)


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail=""):
    """Log one PASS/FAIL line for the terminal summary, then assert."""
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line

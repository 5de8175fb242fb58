"""Input checks shared by the estimators and functional entry points."""
import numpy as np
import torch

from .errors import UsageError


def check_images(X, multiple_of=1, single=False):
    """Return images as float32 (N, H, W, 3) in [0, 1] (or (H, W, 3) when ``single``)."""
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    X = np.asarray(X, dtype=np.float32)
    expected = 3 if single else 4
    if X.ndim != expected or X.shape[-1] != 3:
        shape = "(H, W, 3)" if single else "(N, H, W, 3)"
        raise UsageError(f"expected images shaped {shape}, got {X.shape}")
    h, w = X.shape[-3], X.shape[-2]
    if h % multiple_of or w % multiple_of:
        raise UsageError(f"image size {w}x{h} is not divisible by {multiple_of}")
    if not np.all(np.isfinite(X)):
        raise UsageError("images contain non-finite values")
    return X


def check_feature_map(z, channels=None):
    z = torch.as_tensor(z)
    if z.dim() != 3:
        raise UsageError(f"expected a (C, h, w) feature map, got shape {tuple(z.shape)}")
    if channels is not None and z.shape[0] != channels:
        raise UsageError(f"feature map has {z.shape[0]} channels, expected {channels}")
    return z


def check_unit_interval(name, value):
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise UsageError(f"{name} must lie in [0, 1], got {value}")
    return value

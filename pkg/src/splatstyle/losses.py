import math

import torch
import torch.nn.functional as F

from .errors import UsageError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM of two (H, W, C) images in [0, 1].

    11x11 Gaussian window (sigma 1.5), zero padding to keep the map at full size,
    channels averaged.
    """
    if a.shape != b.shape or a.dim() != 3:
        raise UsageError(f"ssim needs two (H, W, C) images of equal shape, got {tuple(a.shape)} and {tuple(b.shape)}")
    c = a.shape[-1]
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]
    w = gaussian_window(dtype=a.dtype).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)
    pad = SSIM_WINDOW // 2
    filt = lambda img: F.conv2d(img, w, padding=pad, groups=c)
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def dssim(a, b):
    return (1.0 - ssim(a, b)) / 2.0


def l1(a, b):
    return (a - b).abs().mean()


def photometric_loss(render, gt, lam=0.2, return_terms=False):
    """(1 - lam) * L1 + lam * D-SSIM."""
    if render.shape != gt.shape:
        raise UsageError("render and ground truth shapes differ")
    l1_term = l1(render, gt)
    d_term = dssim(render, gt) if lam > 0 else render.new_zeros(())
    total = (1 - lam) * l1_term + lam * d_term
    if return_terms:
        return total, l1_term, d_term
    return total


def feature_loss(rendered, target):
    """Mean absolute difference between pooled rendered features and encoder targets."""
    if rendered.shape != target.shape:
        raise UsageError(f"feature maps differ in shape: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    return l1(rendered, target.to(rendered.dtype))


def psnr(a, b) -> float:
    mse = float(((torch.as_tensor(a).double() - torch.as_tensor(b).double()) ** 2).mean())
    return 10.0 * math.log10(1.0 / max(mse, 1e-20))

"""Image <-> feature codec: a small convolutional encoder/decoder pair.

The encoder supplies the distillation targets and the style statistics; the decoder
turns (stylized) rendered feature maps back into images. Both are trained once on a
reconstruction objective and then frozen.

Feature maps are tensors laid out (C, h, w); images are (H, W, 3) in [0, 1].
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import check_feature_map, check_images
from .errors import TrainingFailureError, UsageError


@dataclass
class CodecSpec:
    feature_dim: int = 32
    widths: tuple = (16, 32)
    kernel_size: int = 3
    downsample: int = 4
    seed: int = 0
    layers: list = field(default_factory=list)

    def __post_init__(self):
        if self.downsample not in (1, 2, 4):
            raise UsageError("downsample factor must be 1, 2 or 4")
        n_stride = {1: 0, 2: 1, 4: 2}[self.downsample]
        widths = list(self.widths)
        if len(widths) != 2:
            raise UsageError("widths must list the two hidden channel counts")
        chans = [3] + widths + [self.feature_dim]
        strides = [1] * (3 - n_stride) + [2] * n_stride
        self.layers = [
            {"in": chans[i], "out": chans[i + 1], "kernel": self.kernel_size, "stride": strides[i], "act": "relu"}
            for i in range(3)
        ]


def _conv(cin, cout, k, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, padding_mode="reflect")


class Encoder(nn.Module):
    def __init__(self, spec: CodecSpec):
        super().__init__()
        mods = []
        for layer in spec.layers:
            mods += [_conv(layer["in"], layer["out"], layer["kernel"], layer["stride"]), nn.ReLU()]
        self.net = nn.Sequential(*mods)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """Mirror of the encoder with nearest-neighbour upsampling; output clipped to [0, 1]."""

    def __init__(self, spec: CodecSpec):
        super().__init__()
        mods = []
        for layer in reversed(spec.layers):
            mods.append(_conv(layer["out"], layer["out"], layer["kernel"]))
            mods.append(nn.ReLU())
            if layer["stride"] == 2:
                mods.append(nn.Upsample(scale_factor=2, mode="nearest"))
            mods.append(_conv(layer["out"], layer["in"], layer["kernel"]))
            if layer["in"] != 3:
                mods.append(nn.ReLU())
        self.net = nn.Sequential(*mods)

    def forward(self, z):
        y = self.net(z)
        # clipped forward, identity backward: a saturated output never loses its gradient
        return y + (y.clamp(0.0, 1.0) - y).detach()


def _to_nchw(images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images, dtype=np.float32) if not isinstance(images, torch.Tensor) else images)
    return x.float().permute(0, 3, 1, 2).contiguous()


class FeatureCodec(BaseEstimator, TransformerMixin):
    """Encoder/decoder pair with the scikit-learn transformer interface.

    ``transform`` encodes images (N, H, W, 3) to feature maps (N, C, H/k, W/k);
    ``inverse_transform`` decodes them back.
    """

    def __init__(self, feature_dim=32, widths=(16, 32), downsample=4, n_iter=2000, learning_rate=2e-3,
                 batch_size=8, random_state=0):
        self.feature_dim = feature_dim
        self.widths = widths
        self.downsample = downsample
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def _build(self):
        self.spec_ = CodecSpec(self.feature_dim, tuple(self.widths), downsample=self.downsample, seed=self.random_state)
        state = torch.random.get_rng_state()
        torch.manual_seed(self.random_state)
        self.encoder_ = Encoder(self.spec_)
        self.decoder_ = Decoder(self.spec_)
        torch.random.set_rng_state(state)

    def fit(self, X, y=None):
        images = check_images(X, multiple_of=self.downsample)
        if len(images) == 0:
            raise UsageError("codec corpus is empty")
        self._build()
        self.loss_history_ = _train(self.encoder_, self.decoder_, images, self.n_iter, self.learning_rate,
                                    self.batch_size, self.random_state)
        self.freeze()
        return self

    def freeze(self):
        for p in list(self.encoder_.parameters()) + list(self.decoder_.parameters()):
            p.requires_grad_(False)
        self.encoder_.eval()
        self.decoder_.eval()
        return self

    def encode(self, image) -> torch.Tensor:
        """One image (H, W, 3) -> feature map (C, H/k, W/k)."""
        check_is_fitted(self, "encoder_")
        x = check_images(image, multiple_of=self.downsample, single=True)
        with torch.no_grad():
            return self.encoder_(_to_nchw(x[None]))[0]

    def decode(self, features) -> torch.Tensor:
        """Feature map (C, h, w) -> image (H, W, 3) in [0, 1]."""
        check_is_fitted(self, "decoder_")
        z = check_feature_map(features, self.feature_dim)
        with torch.no_grad():
            return self.decoder_(z.float()[None])[0].permute(1, 2, 0)

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        images = check_images(X, multiple_of=self.downsample)
        with torch.no_grad():
            return self.encoder_(_to_nchw(images)).numpy()

    def inverse_transform(self, Z):
        check_is_fitted(self, "decoder_")
        z = torch.as_tensor(np.asarray(Z, dtype=np.float32))
        if z.dim() != 4 or z.shape[1] != self.feature_dim:
            raise UsageError(f"expected feature maps (N, {self.feature_dim}, h, w)")
        with torch.no_grad():
            return self.decoder_(z).permute(0, 2, 3, 1).numpy()

    def reconstruction_psnr(self, X) -> float:
        images = check_images(X, multiple_of=self.downsample)
        recon = self.inverse_transform(self.transform(images))
        mse = float(np.mean((recon.astype(np.float64) - images) ** 2))
        return float(10 * np.log10(1.0 / max(mse, 1e-20)))

    def state_arrays(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "encoder_")
        out = {f"encoder.{k}": v.detach().numpy().copy() for k, v in self.encoder_.state_dict().items()}
        out.update({f"decoder.{k}": v.detach().numpy().copy() for k, v in self.decoder_.state_dict().items()})
        return out

    def load_state_arrays(self, arrays: dict):
        self._build()
        enc = {k[len("encoder."):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith("encoder.")}
        dec = {k[len("decoder."):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith("decoder.")}
        self.encoder_.load_state_dict(enc)
        self.decoder_.load_state_dict(dec)
        self.loss_history_ = []
        return self.freeze()

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_arrays().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def _train(encoder, decoder, images, n_iter, lr, batch_size, seed):
    x_all = _to_nchw(images)
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(int(n_iter), 1), eta_min=lr * 0.05)
    rng = np.random.default_rng(seed)
    history = []
    for it in range(int(n_iter)):
        idx = torch.as_tensor(rng.choice(len(x_all), size=min(batch_size, len(x_all)), replace=False))
        x = x_all[idx]
        if rng.random() < 0.5:
            x = x.flip(-1)
        loss = (decoder(encoder(x)) - x).abs().mean()
        if not torch.isfinite(loss):
            raise TrainingFailureError("codec reconstruction loss is not finite", it)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        history.append(float(loss.detach()))
    return history


def train_codec(images, iterations=2000, learning_rate=2e-3, feature_dim=32, seed=0, batch_size=8) -> FeatureCodec:
    """Jointly train encoder and decoder on L1 reconstruction, then freeze both."""
    codec = FeatureCodec(feature_dim=feature_dim, n_iter=iterations, learning_rate=learning_rate,
                         batch_size=batch_size, random_state=seed)
    return codec.fit(images)


def encode(codec: FeatureCodec, image) -> torch.Tensor:
    return codec.encode(image)


def decode(codec: FeatureCodec, features) -> torch.Tensor:
    return codec.decode(features)


def feature_distance(a, b, weights=None) -> float:
    """Mean squared difference of feature maps (C, h, w) after per-channel scaling.

    Each channel is divided by the RMS of that channel over both maps, so the value is
    symmetric, scale-aware, and zero only when the maps are equal. ``weights`` (h, w)
    optionally weights spatial positions.
    """
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape or a.dim() != 3:
        raise UsageError(f"feature maps must share a (C, h, w) shape, got {tuple(a.shape)} and {tuple(b.shape)}")
    scale = torch.sqrt(0.5 * (a.pow(2).mean((1, 2)) + b.pow(2).mean((1, 2))) + 1e-12)[:, None, None]
    d = ((a - b) / scale).pow(2).mean(0)
    if weights is None:
        return float(d.mean())
    w = torch.as_tensor(weights, dtype=torch.float64)
    if w.shape != d.shape or float(w.sum()) <= 0:
        raise UsageError("weights must match the feature resolution and have positive mass")
    return float((d * w).sum() / w.sum())


def pool_features(feature_map: torch.Tensor, k: int) -> torch.Tensor:
    """Rendered (H, W, C) map -> (C, H/k, W/k) by k x k average pooling."""
    x = feature_map.permute(2, 0, 1)
    if k == 1:
        return x
    return F.avg_pool2d(x[None], k)[0]

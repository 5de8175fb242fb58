"""Estimator front end: fit a dynamic scene, then render and stylize it zero-shot."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .codec import FeatureCodec
from .dataio.images import quantize
from .dataio.manifest import Dataset, load_dataset
from .dataio.synthetic import SyntheticSpec, codec_corpus
from .errors import UsageError
from .evaluation import stylize_naive
from .stylization import StyleCode, interpolate_styles, render_stylized
from .trainer import TrainConfig, Trainer, load_state, render_rgb


def _as_dataset(X) -> Dataset:
    if isinstance(X, Dataset):
        return X
    if isinstance(X, (str, Path)):
        return load_dataset(X)
    raise UsageError("expected a Dataset or a dataset directory")


def corpus_for(dataset: Dataset, n_images: int, seed: int) -> np.ndarray:
    """Codec training images: synthetic frames rendered at the dataset resolution."""
    cam = dataset.cameras[0]
    if cam.width != cam.height:
        # non-square data: train on the dataset's own frames instead
        images = np.asarray(dataset.images if isinstance(dataset.images, np.ndarray) else dataset.images[:1])
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(images), size=min(n_images, len(images)), replace=False)
        return images[np.sort(pick)]
    return quantize(codec_corpus(seed, n_images, SyntheticSpec(resolution=cam.width)))


class SceneStylizer(BaseEstimator):
    """Fits canonical Gaussians + deformation + distilled features to a multi-view video.

    ``fit`` trains the codec (unless one is passed) and runs both training phases;
    ``predict`` renders RGB for (camera, time) queries; ``stylize`` renders any style
    image without further optimization; ``score`` is the mean PSNR on held-out cameras.
    """

    def __init__(self, pretrain_iters=2000, joint_iters=1000, feature_dim=32, lambda_dssim=0.2,
                 held_out_cameras=(0,), codec=None, codec_iters=2000, codec_images=200, train_options=None,
                 random_state=0):
        self.pretrain_iters = pretrain_iters
        self.joint_iters = joint_iters
        self.feature_dim = feature_dim
        self.lambda_dssim = lambda_dssim
        self.held_out_cameras = held_out_cameras
        self.codec = codec
        self.codec_iters = codec_iters
        self.codec_images = codec_images
        self.train_options = train_options
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        opts = dict(self.train_options or {})
        opts.update(pretrain_iters=self.pretrain_iters, joint_iters=self.joint_iters, feature_dim=self.feature_dim,
                    lambda_dssim=self.lambda_dssim, held_out_cameras=tuple(self.held_out_cameras),
                    seed=self.random_state)
        return TrainConfig(**opts).validate()

    def fit(self, X, y=None, log_path=None, checkpoint_path=None):
        dataset = _as_dataset(X)
        config = self._config()
        codec = self.codec
        if codec is None and config.joint_iters > 0:
            codec = FeatureCodec(feature_dim=self.feature_dim, n_iter=self.codec_iters, random_state=self.random_state)
            codec.fit(corpus_for(dataset, self.codec_images, self.random_state + 1))
        self.trainer_ = Trainer(dataset, config, codec)
        self.trainer_.run(log_path=log_path, checkpoint_path=checkpoint_path)
        self._adopt(self.trainer_.state, codec)
        self.dataset_ = dataset
        return self

    def _adopt(self, state, codec):
        self.state_ = state
        self.codec_ = codec
        self.running_stats_ = state.rs
        self.n_gaussians_ = len(state.scene)

    @classmethod
    def from_checkpoint(cls, path) -> SceneStylizer:
        state, config, codec = load_state(path)
        est = cls(config.pretrain_iters, config.joint_iters, config.feature_dim, config.lambda_dssim,
                  config.held_out_cameras, codec, random_state=config.seed)
        est._adopt(state, codec)
        return est

    def predict(self, X) -> np.ndarray:
        """RGB renders (N, H, W, 3) for an iterable of (camera, time)."""
        check_is_fitted(self, "state_")
        return np.stack([render_rgb(self.state_, cam, t).numpy() for cam, t in X])

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "state_")
        from .trainer import evaluate_psnr

        dataset = _as_dataset(X)
        cams = tuple(self.held_out_cameras) or tuple(range(len(dataset.cameras)))
        return evaluate_psnr(self.state_, dataset, cams)

    def style_code(self, image) -> StyleCode:
        check_is_fitted(self, "codec_")
        if self.codec_ is None:
            raise UsageError("this scene was trained without features (no features)")
        return StyleCode.from_image(self.codec_, image)

    def stylize(self, style_image, views, style_b=None, interp=0.0, normalization="running") -> np.ndarray:
        """Stylized frames (N, H, W, 3) for (camera, time) ``views``; no optimization step runs."""
        check_is_fitted(self, "state_")
        if not self.state_.has_features or not self.running_stats_.initialized:
            raise UsageError("checkpoint has no features; run the joint phase first")
        style = self.style_code(style_image)
        if style_b is not None:
            style = interpolate_styles(style, self.style_code(style_b), interp)
        st = self.state_
        frames = []
        with torch.no_grad():
            for cam, t in views:
                if normalization == "running":
                    img = render_stylized(st.scene, st.field, st.head, cam, t, style, st.rs, self.codec_).numpy()
                elif normalization == "naive":
                    img = stylize_naive(st.scene, st.field, st.head, cam, t, style, self.codec_)
                else:
                    raise UsageError("normalization must be 'running' or 'naive'")
                frames.append(img)
        return np.stack(frames)

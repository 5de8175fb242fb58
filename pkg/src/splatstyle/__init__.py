"""Dynamic Gaussian scenes with distilled features and zero-shot AdaIN stylization."""
from .codec import FeatureCodec, train_codec
from .deformation import DeformationHead, HexPlaneField, deform_scene
from .errors import (
    CheckpointChecksumError, CheckpointError, CheckpointTruncatedError, CheckpointVersionError, DatasetError,
    DegenerateCovarianceError, InvalidParameterError, SplatStyleError, TrainingFailureError, UsageError,
)
from .estimator import SceneStylizer
from .scene import Camera, Gaussian, GaussianParams, GaussianScene
from .stylization import ChannelStats, RunningStats, StyleCode, interpolate_styles, render_stylized, stylize_gaussians
from .trainer import TrainConfig, Trainer, run_training

__version__ = "0.1.0"

__all__ = [
    "FeatureCodec", "train_codec", "DeformationHead", "HexPlaneField", "deform_scene", "SceneStylizer", "Camera",
    "Gaussian", "GaussianParams", "GaussianScene", "ChannelStats", "RunningStats", "StyleCode", "interpolate_styles",
    "render_stylized", "stylize_gaussians", "TrainConfig", "Trainer", "run_training", "CheckpointChecksumError",
    "CheckpointError", "CheckpointTruncatedError", "CheckpointVersionError", "DatasetError",
    "DegenerateCovarianceError", "InvalidParameterError", "SplatStyleError", "TrainingFailureError", "UsageError",
]

from .checkpoint import load_checkpoint, save_checkpoint
from .images import read_image, write_image
from .manifest import Dataset, DatasetManifest, Frame, load_dataset
from .synthetic import GroundTruthScene, SyntheticSpec, generate_synthetic, load_ground_truth

__all__ = [
    "load_checkpoint", "save_checkpoint", "read_image", "write_image", "Dataset", "DatasetManifest", "Frame",
    "load_dataset", "GroundTruthScene", "SyntheticSpec", "generate_synthetic", "load_ground_truth",
]

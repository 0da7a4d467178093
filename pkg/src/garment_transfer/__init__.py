"""Pose-guided garment transfer with pixel-aligned implicit textured reconstruction."""
from .config import TrainConfig
from .core import TexturedMesh, ValidationError, WeakPerspectiveCamera
from .synthdata import SyntheticDataset, build_dataset

__version__ = "0.1.0"

__all__ = ["TrainConfig", "TexturedMesh", "ValidationError", "WeakPerspectiveCamera",
           "SyntheticDataset", "build_dataset", "__version__"]

"""Self-supervised SAR feature extraction: data, augmentations, ViT encoder,
masked Siamese pretraining and the downstream evaluation harnesses."""

from .config import RunConfig, load_config
from .container import ContainerError, read_tensor, write_tensor
from .model import FeatureExtractor, SafeModel, load_feature_extractor
from .seeding import SeedStream

__version__ = "0.1.0"

__all__ = [
    "ContainerError",
    "FeatureExtractor",
    "RunConfig",
    "SafeModel",
    "SeedStream",
    "load_config",
    "load_feature_extractor",
    "read_tensor",
    "write_tensor",
]

"""Twin-attention 3D instance segmentation on synthetic scenes, in numpy."""

from .decoder import DecoderConfig
from .model import TwinAttnModel
from .scene import SceneConfig, generate_scene, partition_superpoints

__all__ = ["DecoderConfig", "SceneConfig", "TwinAttnModel", "generate_scene", "partition_superpoints"]
__version__ = "0.1.0"

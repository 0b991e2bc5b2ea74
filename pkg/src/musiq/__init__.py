"""Multi-scale image quality Transformer."""
from .config import ModelConfig, PRESETS
from .model import MusiqModel

__all__ = ["ModelConfig", "MusiqModel", "PRESETS"]
__version__ = "0.1.0"

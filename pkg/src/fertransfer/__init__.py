"""Facial-expression transfer learning: balanced sampling, ViT + ML-Decoder, benchmark harness."""

from .labels import EmotionLabel, LABEL_NAMES, NUM_CLASSES

__version__ = "0.1.0"

__all__ = ["EmotionLabel", "LABEL_NAMES", "NUM_CLASSES"]

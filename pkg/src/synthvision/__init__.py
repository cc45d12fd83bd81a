"""Few-shot diffusion synthesis feeding a Vision Transformer classifier."""

__version__ = "0.1.0"

CLASS_NAMES = ("M-pox", "Normal", "Other")

"""Attention-guided factorized bilinear pooling for audio-video emotion recognition."""

from fbpfusion.tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

EMOTIONS = ("Angry", "Disgust", "Fear", "Happy", "Neutral", "Sad", "Surprise")

__all__ = ["EMOTIONS", "Tensor", "backward", "no_grad", "__version__"]

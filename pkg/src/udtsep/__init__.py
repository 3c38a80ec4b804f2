"""Unsupervised domain translation for single-channel source separation.

A numpy-only autodiff core, 1-D convolutional VAE layers, STFT front end,
corpus tooling, the dual-VAE model with shared blocks, separation metrics and
a command-line interface.
"""

from .dsp import StftConfig, WaveClip
from .model import ModelConfig, SupervisedModel, UdtModel, separate

__version__ = "0.1.0"

__all__ = ["StftConfig", "WaveClip", "ModelConfig", "UdtModel", "SupervisedModel", "separate", "__version__"]

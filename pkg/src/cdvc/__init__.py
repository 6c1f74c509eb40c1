"""Noise-robust voice conversion trained by denoising, with optional
recording-quality and acoustic-scene conditioning.

The pipeline: synthesize a toy corpus, mix seeded noise into clean sources,
extract frozen content/quality/scene features, train a cross-attention
conversion model against clean mel targets, and score conversions with a
rule-based recognizer (token error rate) and a spectral speaker embedder
(cosine similarity).
"""

from .audio import FramingSpec, MelConfig, MelSpectrogram, Waveform
from .conditioning import ConditionTrack
from .degradation import NoiseBank, SnrSpec
from .errors import CdvcError
from .model import ModelConfig, VARIANTS, VcModel
from .training import FitConfig, OptimizerConfig, TrainingPair

__version__ = "0.1.0"

__all__ = [
    "CdvcError",
    "ConditionTrack",
    "FitConfig",
    "FramingSpec",
    "MelConfig",
    "MelSpectrogram",
    "ModelConfig",
    "NoiseBank",
    "OptimizerConfig",
    "SnrSpec",
    "TrainingPair",
    "VARIANTS",
    "VcModel",
    "Waveform",
    "__version__",
]

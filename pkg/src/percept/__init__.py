"""Speech enhancement toolkit.

Training objectives based on distances between convolutional feature-encoder
representations, a multi-channel mask-based time-domain denoiser, signal and
intelligibility metrics, a synthetic multi-microphone scene generator, and a
correlation-analysis pipeline, all built on a small set of reverse-mode
differentiable layers.
"""

__version__ = "0.1.0"

from percept.audio import AudioBuffer, read_wav, resample, select_channel, write_wav

__all__ = [
    "AudioBuffer",
    "read_wav",
    "write_wav",
    "resample",
    "select_channel",
    "__version__",
]

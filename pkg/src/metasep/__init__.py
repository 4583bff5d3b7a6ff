"""Meta-learned time-domain music source separation.

A mixture is encoded into a learned latent space, per-instrument masks are
predicted by a temporal convolutional subnetwork, and masked latents are
decoded back to waveforms. The masking subnetwork's parameters can be owned
per instrument, tied across instruments, or generated on the fly from a
small instrument embedding. Three progressive-resolution stages (8, 16,
32 kHz) refine the estimates, each stage conditioning on the previous
stage's masked latents.
"""

__version__ = "0.1.0"

from .errors import (
    AudioIOError,
    CheckpointError,
    ConfigError,
    DataError,
    MetasepError,
    ShapeError,
    TrainingError,
)

__all__ = [
    "AudioIOError",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "MetasepError",
    "ShapeError",
    "TrainingError",
    "__version__",
]

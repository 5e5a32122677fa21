"""Spectrally decoupled flow-matching control policy."""

from .backbone import BackboneConfig, Conditioning, KoopmanFlowModel, VelocityFields
from .gradcore import DiffTensor, Tape
from .inference import RhcConfig, SamplerConfig, euler_sample, rhc_execute
from .spectral import FrequencyMask, SpectralSplit
from .synthbench import GenSpec, Trajectory
from .training import LossBreakdown, TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "Conditioning",
    "DiffTensor",
    "FrequencyMask",
    "GenSpec",
    "KoopmanFlowModel",
    "LossBreakdown",
    "RhcConfig",
    "SamplerConfig",
    "SpectralSplit",
    "Tape",
    "TrainConfig",
    "Trainer",
    "Trajectory",
    "VelocityFields",
    "euler_sample",
    "rhc_execute",
    "__version__",
]

"""Binaural complex convolutional recurrent speech enhancement with cue-preserving losses."""
from .checkpoint import ModelCheckpoint
from .cues import SpeechActivityMask, ibm_combine, ibm_single, ild_map, ipd_map, speech_activity_mask
from .dsp import BinauralWaveform, ComplexSpectrogram, StftConfig, istft, stft
from .loss import LossBreakdown, LossWeights, composite_loss, ild_loss, ipd_loss, snr_loss, stoi_loss
from .model import BCCRN, ComplexRatioMask, ModelConfig, bccrn_forward, count_parameters, crm_apply, crm_compute
from .stoi import stoi

__version__ = "0.1.0"

__all__ = [
    "BCCRN", "BinauralWaveform", "ComplexRatioMask", "ComplexSpectrogram", "LossBreakdown", "LossWeights",
    "ModelCheckpoint", "ModelConfig", "SpeechActivityMask", "StftConfig", "bccrn_forward", "composite_loss",
    "count_parameters", "crm_apply", "crm_compute", "ibm_combine", "ibm_single", "ild_loss", "ild_map",
    "ipd_loss", "ipd_map", "istft", "snr_loss", "speech_activity_mask", "stft", "stoi", "stoi_loss",
]

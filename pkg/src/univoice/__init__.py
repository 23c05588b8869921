"""Audio-visual speech enhancement and separation with a Wasserstein autoencoder prior."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import GroundTruth, SynthConfig, VisualFeatures, read_manifest, read_wav, synth_dataset, write_wav
from .dsp import ComplexSpectrogram, StftConfig, Waveform, istft, stft
from .errors import UniVoiceError
from .estimator import UniVoiceLite
from .inference import McemConfig, enhance, separate
from .metrics import evaluate, sdr, stoi
from .model import ModelConfig
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ComplexSpectrogram", "GroundTruth", "McemConfig", "ModelConfig", "RunConfig",
    "StftConfig", "SynthConfig", "TrainConfig", "UniVoiceError", "UniVoiceLite", "VisualFeatures",
    "Waveform", "enhance", "evaluate", "istft", "load_checkpoint", "read_manifest", "read_wav",
    "save_checkpoint", "sdr", "separate", "stft", "stoi", "synth_dataset", "train", "write_wav",
]

"""TitaNet speaker embeddings in numpy, with verification and diarization tooling."""

from .encoder import EncoderConfig, PRESETS, build_encoder, encoder_forward, preset
from .errors import (CheckpointError, ConfigError, ParseError, ShapeError, TitaNetError,
                     TrainingDiverged, UnsupportedFormatError)
from .features import AudioSignal, FrameConfig, MelSpectrogram, extract_features, load_wav
from .pooldec import SpeakerModel, build_model, count_parameters, extract_embedding
from .train import AAMConfig, TrainConfig, aam_loss, train
from .verify import compute_eer, compute_min_dcf, score_trials
from .diarize import compute_der, diarize, nme_sc_cluster

__version__ = "0.1.0"

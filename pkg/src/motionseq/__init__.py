"""Two-stage music-to-motion generation on numpy: a VQ-VAE motion tokenizer and an
autoregressive decoder with ALiBi attention, music cross-attention and style
modulation, plus audio features, metrics and a checkpointed pipeline."""

from .errors import FormatError, MotionSeqError, NumericalAbort, ValidationError
from .motion import MotionSequence, load_motion, save_motion, synth_motion
from .audio import ConditioningTrack, build_track, load_wav
from .vqvae import TokenSequence, VqVae, VqVaeConfig
from .decoder import DecoderConfig, MotionSeqDecoder, generate, chain_generate
from .config import PipelineConfig, load_config

__version__ = "0.1.0"

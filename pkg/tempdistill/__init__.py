"""
Desk-scale lab for distilling a summarisation transformer through pseudo labels
decoded with rescaled attention temperature
"""

__version__ = "0.3.0"

from .errors import LabError, InvalidArgument, InvalidState, ParseError, DistillationError
from .model import ModelConfig, AttentionTemperatures, Transformer
from .decoding import BeamConfig, DecodeResult
from .corpus import Corpus, Example, Vocabulary, SynthConfig

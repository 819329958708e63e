"""Residual-quantized text-to-motion: scale-adaptive RVQ, hierarchical causal transformer, streaming sessions."""

__version__ = "0.1.0"

from .config import RunConfig, SamplerConfig, TrainConfig, TransformerConfig, VQConfig, load_config
from .data import Dataset, MotionSequence, NormStats, synthesize_corpus
from .errors import (ConfigError, ContractError, DimensionError, ExhaustionError, NumericError,
                     RqMotionError, StateError, TokenIndexError, ValidationError)
from .quantizer import MotionVQ, QuantizerStack
from .session import GenerationSession, finalize, run_schedule
from .text import embed_prompt, tca
from .transformer import RqhcModel, ce_loss

__all__ = [
    "ConfigError", "ContractError", "Dataset", "DimensionError", "ExhaustionError", "GenerationSession",
    "MotionSequence", "MotionVQ", "NormStats", "NumericError", "QuantizerStack", "RqMotionError", "RqhcModel",
    "RunConfig", "SamplerConfig", "StateError", "TokenIndexError", "TrainConfig", "TransformerConfig",
    "VQConfig", "ValidationError", "ce_loss", "embed_prompt", "finalize", "load_config", "run_schedule",
    "synthesize_corpus", "tca",
]

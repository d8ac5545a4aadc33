"""Toy-scale study of zero-shot crosslingual summarization with a numpy seq2seq model."""

from .corpus import ToyExample, ToyLanguageFamily
from .model import DecodeConfig, ModelConfig, Seq2SeqModel, load_checkpoint, save_checkpoint

__all__ = [
    "DecodeConfig",
    "ModelConfig",
    "Seq2SeqModel",
    "ToyExample",
    "ToyLanguageFamily",
    "load_checkpoint",
    "save_checkpoint",
]
__version__ = "0.1.0"

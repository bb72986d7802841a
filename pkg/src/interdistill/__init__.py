"""Two-stage ranking distillation for a hashed dual-encoder retriever."""

from .corpus import CandidateSet, DataCategory, Document, QAExample
from .distill import DistillConfig, child_seed
from .encoder import EncoderModel, load_model, save_model
from .synth import SynthConfig, generate

__all__ = ["CandidateSet", "DataCategory", "DistillConfig", "Document", "EncoderModel",
           "QAExample", "SynthConfig", "child_seed", "generate", "load_model", "save_model"]
__version__ = "0.1.0"

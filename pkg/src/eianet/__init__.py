"""Source-free domain adaptation with a fixed simplex-ETF classifier.

A small numpy-only stack: reverse-mode tensors, a convolutional encoder with
spatial self-attention, a frozen equiangular prototype classifier, feature-bank
adaptation losses, neural-collapse diagnostics, a synthetic domain-shift
benchmark and a command line (``python -m eianet``).
"""

from .adaptation import (
    SGD,
    AdaptStepReport,
    FeatureBank,
    adapt_step,
    build_bank,
    diversity_loss,
    find_neighbors,
    similarity_loss,
    smoothed_cross_entropy,
    source_train_step,
)
from .attention import AttentionLayer, attention_forward, init_attention
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import DomainDataset, generate, load, save
from .encoder import EncoderModel, calibrate_encoder, forward, init_encoder, init_head
from .errors import ConfigError, ContractError, DataError, DimensionError, EianetError, FormatError
from .etf import EtfClassifier, EtfValidationReport, build_etf, logits, predict, validate_etf
from .nc import NcReport, measure_nc
from .pipeline import adapt, evaluate, nc_report, train_source

__version__ = "0.1.0"

__all__ = [
    "SGD",
    "AdaptStepReport",
    "FeatureBank",
    "adapt_step",
    "build_bank",
    "diversity_loss",
    "find_neighbors",
    "similarity_loss",
    "smoothed_cross_entropy",
    "source_train_step",
    "AttentionLayer",
    "attention_forward",
    "init_attention",
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "RunConfig",
    "DomainDataset",
    "generate",
    "load",
    "save",
    "EncoderModel",
    "calibrate_encoder",
    "forward",
    "init_encoder",
    "init_head",
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "EianetError",
    "FormatError",
    "EtfClassifier",
    "EtfValidationReport",
    "build_etf",
    "logits",
    "predict",
    "validate_etf",
    "NcReport",
    "measure_nc",
    "adapt",
    "evaluate",
    "nc_report",
    "train_source",
]

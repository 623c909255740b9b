"""Forecasting architectures: LSTM baseline, NT-GAT and (Cluster-)CALF."""

from .calf import (
    CALF,
    CALFConfig,
    CALFLoss,
    CALFOutput,
    ClusterCALF,
    LoRALinear,
    calf_losses,
    load_vocab_embedding,
    principal_word_embeddings,
)
from .common import ForecastOutput
from .lstm import LSTMConfig, LSTMForecaster
from .ntgat import NTGAT, GraphAttention, NTGATConfig

__all__ = [
    "CALF",
    "CALFConfig",
    "CALFLoss",
    "CALFOutput",
    "ClusterCALF",
    "ForecastOutput",
    "GraphAttention",
    "LSTMConfig",
    "LSTMForecaster",
    "LoRALinear",
    "NTGAT",
    "NTGATConfig",
    "calf_losses",
    "load_vocab_embedding",
    "principal_word_embeddings",
]

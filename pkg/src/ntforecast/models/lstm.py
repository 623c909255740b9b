"""Single-layer LSTM baseline: LSTM -> dropout -> dense multi-horizon head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from ..errors import ArgumentError
from .common import check_inputs


@dataclass(frozen=True)
class LSTMConfig:
    n_series: int
    input_length: int
    horizon: int
    hidden_units: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        for name in ("n_series", "input_length", "horizon", "hidden_units"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ArgumentError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class LSTMForecaster(nn.Module):
    def __init__(self, cfg: LSTMConfig):
        super().__init__()
        self.cfg = cfg
        self.lstm = nn.LSTM(cfg.n_series, cfg.hidden_units, batch_first=True)
        self.dropout = nn.Dropout(cfg.dropout_rate)
        self.head = nn.Linear(cfg.hidden_units, cfg.horizon * cfg.n_series)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_inputs(x, self.cfg.n_series, self.cfg.input_length)
        _, (h, _) = self.lstm(x)
        out = self.head(self.dropout(h[-1]))
        return out.view(x.shape[0], self.cfg.horizon, self.cfg.n_series)

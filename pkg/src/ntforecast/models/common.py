"""Pieces shared by all architectures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ShapeError


@dataclass(frozen=True, eq=False)
class ForecastOutput:
    """``S x H x N`` predictions in original units."""

    predictions: np.ndarray
    link_ids: tuple[str, ...]
    branch_hidden: list | None = None


def check_inputs(x: torch.Tensor, n_series: int | None, input_length: int) -> None:
    if x.ndim != 3:
        raise ShapeError(f"batch_inputs must be S x L x N, got {tuple(x.shape)}")
    if x.shape[1] != input_length or (n_series is not None and x.shape[2] != n_series):
        want_n = "N" if n_series is None else n_series
        raise ShapeError(
            f"batch_inputs has shape {tuple(x.shape)}, expected (S, {input_length}, {want_n})"
        )

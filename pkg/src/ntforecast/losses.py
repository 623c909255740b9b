"""Differentiable losses shared by training and the CALF objective."""

from __future__ import annotations

import torch

from .errors import ArgumentError, ShapeError


def huber_loss(pred: torch.Tensor, target: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Mean Huber loss: ``0.5 r^2`` inside ``|r| <= delta``, linear outside."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if delta <= 0:
        raise ArgumentError(f"delta must be positive, got {delta}")
    r = (pred - target).abs()
    quad = 0.5 * r * r
    lin = delta * (r - 0.5 * delta)
    return torch.where(r <= delta, quad, lin).mean()


def mean_abs_diff(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape {tuple(a.shape)} != {tuple(b.shape)}")
    return (a - b).abs().mean()

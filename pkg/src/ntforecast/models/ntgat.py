"""Network-temporal graph attention model.

At every time step each link's scalar reading is lifted to a feature vector,
mixed with its k-hop neighbours by masked multi-head graph attention, and the
resulting per-link feature sequence runs through two stacked LSTMs (shared
across links) and a linear multi-horizon head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..errors import ArgumentError, ShapeError, StructuralError
from ..graph import AdjacencySpec
from .common import check_inputs

ACTIVATIONS = {
    "elu": F.elu,
    "relu": F.relu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


class GraphAttention(nn.Module):
    """Multi-head attention restricted to a boolean adjacency mask.

    For head ``h``: ``e_ij = LeakyReLU(a_src . W h_i + a_dst . W h_j)`` on
    adjacent pairs, softmax over ``j``, heads concatenated. With ``residual``
    a bias-free projection of ``h_i`` is added before the activation, so a
    node keeps its own signal however attention spreads.
    """

    def __init__(self, in_dim: int, out_dim: int, n_heads: int, negative_slope: float = 0.2,
                 activation: str = "elu", residual: bool = False):
        super().__init__()
        if n_heads < 1 or out_dim % n_heads:
            raise ArgumentError(f"out_dim={out_dim} must be a positive multiple of n_heads={n_heads}")
        if activation not in ACTIVATIONS:
            raise ArgumentError(f"unknown activation {activation!r}")
        self.n_heads = n_heads
        self.head_dim = out_dim // n_heads
        self.negative_slope = negative_slope
        self.activation = activation
        self.weight = nn.Linear(in_dim, out_dim, bias=False)
        self.att_src = nn.Parameter(torch.empty(n_heads, self.head_dim))
        self.att_dst = nn.Parameter(torch.empty(n_heads, self.head_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        self.res = nn.Linear(in_dim, out_dim, bias=False) if residual else None
        nn.init.xavier_uniform_(self.weight.weight)
        nn.init.xavier_uniform_(self.att_src)
        nn.init.xavier_uniform_(self.att_dst)

    def forward(self, h: torch.Tensor, mask: torch.Tensor, return_attention: bool = False):
        """``h``: ``(..., N, in_dim)``; ``mask``: ``(N, N)`` bool, row ``i`` = neighbours of ``i``."""
        if mask.ndim != 2 or mask.shape[0] != mask.shape[1] or mask.shape[0] != h.shape[-2]:
            raise ShapeError(f"adjacency {tuple(mask.shape)} does not match {h.shape[-2]} nodes")
        empty = ~mask.any(dim=1)
        if bool(empty.any()):
            i = int(torch.nonzero(empty)[0])
            raise StructuralError(f"node {i} has an empty neighbourhood; softmax undefined")
        n = h.shape[-2]
        wh = self.weight(h).view(*h.shape[:-1], self.n_heads, self.head_dim)
        # (..., heads, N)
        src = (wh * self.att_src).sum(-1).transpose(-1, -2)
        dst = (wh * self.att_dst).sum(-1).transpose(-1, -2)
        scores = F.leaky_relu(src.unsqueeze(-1) + dst.unsqueeze(-2), self.negative_slope)
        scores = scores.masked_fill(~mask, float("-inf"))
        alpha = torch.softmax(scores, dim=-1)
        # (..., heads, N, head_dim)
        agg = alpha @ wh.transpose(-2, -3)
        out = agg.transpose(-2, -3).reshape(*h.shape[:-2], n, self.n_heads * self.head_dim)
        if self.res is not None:
            out = out + self.res(h)
        out = ACTIVATIONS[self.activation](out + self.bias)
        if return_attention:
            return out, alpha
        return out


@dataclass(frozen=True)
class NTGATConfig:
    n_series: int
    input_length: int
    horizon: int
    adjacency: AdjacencySpec = field(repr=False)
    n_heads: int = 8
    lift_dim: int = 8
    gat_out_dim: int = 16
    lstm1_hidden: int = 64
    lstm2_hidden: int = 128
    dropout_rate: float = 0.0
    negative_slope: float = 0.2
    gat_activation: str = "elu"
    residual: bool = True

    def __post_init__(self):
        if self.n_heads < 1 or self.gat_out_dim % self.n_heads:
            raise ArgumentError("gat_out_dim must be divisible by n_heads")
        if self.adjacency.matrix.shape != (self.n_series, self.n_series):
            raise ShapeError(
                f"adjacency is {self.adjacency.matrix.shape}, expected "
                f"({self.n_series}, {self.n_series})"
            )
        for name in ("input_length", "horizon", "lift_dim", "lstm1_hidden", "lstm2_hidden"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be positive")

    @property
    def hops(self) -> int:
        return self.adjacency.hops

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "adjacency"}
        adj = self.adjacency
        d["adjacency"] = {
            "mode": adj.mode,
            "hops": adj.hops,
            "include_self_loops": adj.include_self_loops,
            "entries": [[int(i), int(j)] for i, j in zip(*np.nonzero(adj.matrix))],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NTGATConfig:
        d = dict(d)
        a = d.pop("adjacency")
        n = d["n_series"]
        m = np.zeros((n, n), dtype=bool)
        for i, j in a["entries"]:
            m[i, j] = True
        adj = AdjacencySpec(a["mode"], a["hops"], a["include_self_loops"], m)
        return cls(adjacency=adj, **d)


class NTGAT(nn.Module):
    def __init__(self, cfg: NTGATConfig):
        super().__init__()
        self.cfg = cfg
        self.lift = nn.Linear(1, cfg.lift_dim)
        self.gat = GraphAttention(cfg.lift_dim, cfg.gat_out_dim, cfg.n_heads,
                                  cfg.negative_slope, cfg.gat_activation, cfg.residual)
        self.lstm1 = nn.LSTM(cfg.gat_out_dim, cfg.lstm1_hidden, batch_first=True)
        self.lstm2 = nn.LSTM(cfg.lstm1_hidden, cfg.lstm2_hidden, batch_first=True)
        self.dropout = nn.Dropout(cfg.dropout_rate)
        self.head = nn.Linear(cfg.lstm2_hidden, cfg.horizon)
        self.register_buffer("mask", torch.as_tensor(np.array(cfg.adjacency.matrix)), persistent=False)

    def spatial(self, x: torch.Tensor, return_attention: bool = False):
        """``S x L x N`` -> ``S x L x N x gat_out_dim``."""
        h = self.lift(x.unsqueeze(-1))
        return self.gat(h, self.mask, return_attention=return_attention)

    def temporal(self, feats: torch.Tensor) -> torch.Tensor:
        """``S x L x N x F`` -> ``S x H x N`` with LSTMs shared across links."""
        S, L, N, Fd = feats.shape
        seq = feats.permute(0, 2, 1, 3).reshape(S * N, L, Fd)
        seq, _ = self.lstm1(seq)
        _, (h, _) = self.lstm2(seq)
        out = self.head(self.dropout(h[-1]))
        return out.view(S, N, self.cfg.horizon).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_inputs(x, self.cfg.n_series, self.cfg.input_length)
        return self.temporal(self.spatial(x))

"""Cross-modal fine-tuned transformer forecaster (CALF) and its clustered variant.

Two branches share one frozen transformer backbone:

* temporal branch: each series' input window becomes one token; the backbone
  runs with LoRA adapters switched on; a linear head maps tokens to horizons.
* textual branch (training only): the same temporal tokens query the
  principal components of the backbone's vocabulary embedding through
  cross-attention; the aligned tokens run through the backbone without
  adapters and through the shared head.

Agreement between branches is enforced by ``calf_losses``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal, Mapping

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..errors import ArgumentError, ConfigurationError, ContractError, ShapeError
from ..graph import ClusterAssignment
from ..losses import huber_loss, mean_abs_diff
from .common import check_inputs


def principal_word_embeddings(vocab_embedding: np.ndarray, P: int) -> np.ndarray:
    """Top-``P`` principal axes of the row-centred vocabulary, scaled by their
    singular values.

    Sign is fixed so that each axis' largest-magnitude coordinate is positive.
    """
    X = np.asarray(vocab_embedding, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ArgumentError(f"vocab embedding must be V x D with V >= 2, got {X.shape}")
    V, D = X.shape
    if not 1 <= P <= min(V, D):
        raise ArgumentError(f"P must lie in [1, {min(V, D)}], got {P}")
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    axes = vt[:P]
    pivot = np.argmax(np.abs(axes), axis=1)
    signs = np.sign(axes[np.arange(P), pivot])
    signs[signs == 0] = 1.0
    return (axes * signs[:, None]) * s[:P, None]


def load_vocab_embedding(path: str | Path) -> np.ndarray:
    """Read a ``V x D`` matrix from ``.npy`` or comma-separated text."""
    path = Path(path)
    if path.suffix == ".npy":
        m = np.load(path)
    else:
        m = np.loadtxt(path, delimiter=",", ndmin=2)
    if m.ndim != 2:
        raise ArgumentError(f"{path}: expected a 2-D matrix, got shape {m.shape}")
    return m.astype(np.float64)


@dataclass(frozen=True)
class CALFConfig:
    input_length: int
    horizon: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 512
    n_principal: int = 32
    lora_rank: int = 4
    lora_alpha: float = 8.0
    lora_targets: tuple[str, ...] = ("q", "v")
    lambda_feature: float = 0.01
    lambda_output: float = 1.0
    dropout_rate: float = 0.1
    backbone_seed: int = 0
    vocab_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))
        for name in ("input_length", "horizon", "d_model", "n_layers", "n_heads", "d_ff", "lora_rank"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ArgumentError("d_model must be divisible by n_heads")
        if self.n_principal < 1 or self.n_principal > min(self.vocab_size, self.d_model):
            raise ArgumentError(
                f"n_principal must lie in [1, min(vocab_size, d_model)] = "
                f"[1, {min(self.vocab_size, self.d_model)}]"
            )
        if self.lambda_feature < 0 or self.lambda_output < 0:
            raise ArgumentError("loss weights must be non-negative")
        if not set(self.lora_targets) <= {"q", "k", "v", "o"}:
            raise ArgumentError(f"lora_targets must be drawn from q, k, v, o; got {self.lora_targets}")
        if not 0 <= self.dropout_rate < 1:
            raise ArgumentError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d


class LoRALinear(nn.Module):
    """Frozen linear map plus a trainable rank-``r`` update ``(alpha/r) B A``.

    ``B`` starts at zero, so a fresh adapter leaves the base output unchanged.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        self.base = base
        self.scaling = alpha / rank
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))

    def forward(self, x: torch.Tensor, adapt: bool = True) -> torch.Tensor:
        out = self.base(x)
        if adapt:
            out = out + self.scaling * (x @ self.lora_a.t() @ self.lora_b.t())
        return out


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.proj = nn.ModuleDict({k: nn.Linear(d_model, d_model) for k in "qkvo"})

    def _project(self, name: str, x: torch.Tensor, adapt: bool) -> torch.Tensor:
        layer = self.proj[name]
        if isinstance(layer, LoRALinear):
            return layer(x, adapt=adapt)
        return layer(x)

    def forward(self, x: torch.Tensor, adapt: bool) -> torch.Tensor:
        *lead, n, d = x.shape
        hd = d // self.n_heads

        def heads(t):
            return t.view(*lead, n, self.n_heads, hd).transpose(-2, -3)

        q = heads(self._project("q", x, adapt))
        k = heads(self._project("k", x, adapt))
        v = heads(self._project("v", x, adapt))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        out = (att @ v).transpose(-2, -3).reshape(*lead, n, d)
        return self._project("o", out, adapt)


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, d_ff)
        self.ff2 = nn.Linear(d_ff, d_model)

    def forward(self, x: torch.Tensor, adapt: bool, p_drop: float) -> torch.Tensor:
        x = x + F.dropout(self.attn(self.norm1(x), adapt), p_drop)
        x = x + F.dropout(self.ff2(F.gelu(self.ff1(self.norm2(x)))), p_drop)
        return x


class Backbone(nn.Module):
    """Small pre-LN transformer encoder standing in for a pretrained LLM.

    Weights and the vocabulary embedding are drawn from ``backbone_seed`` (or
    the vocabulary is loaded from ``vocab_path``) and never trained.
    """

    def __init__(self, cfg: CALFConfig):
        super().__init__()
        gen = torch.Generator().manual_seed(cfg.backbone_seed)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers)
        )
        with torch.no_grad():
            for m in self.layers.modules():
                if isinstance(m, nn.Linear):
                    bound = 1.0 / math.sqrt(m.in_features)
                    m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                    m.bias.copy_(torch.rand(m.bias.shape, generator=gen) * 2 * bound - bound)
        if cfg.vocab_path:
            vocab = load_vocab_embedding(cfg.vocab_path)
            if vocab.shape[1] != cfg.d_model:
                raise ConfigurationError(
                    f"vocabulary width {vocab.shape[1]} does not match d_model={cfg.d_model}"
                )
        else:
            vocab = torch.randn(cfg.vocab_size, cfg.d_model, generator=gen, dtype=torch.float64).numpy()
        self.register_buffer("vocab", torch.as_tensor(vocab, dtype=torch.float32))
        for p in self.layers.parameters():
            p.requires_grad_(False)
        # adapters are trainable; install after freezing the base weights
        for layer in self.layers:
            for name in cfg.lora_targets:
                base = layer.attn.proj[name]
                layer.attn.proj[name] = LoRALinear(base, cfg.lora_rank, cfg.lora_alpha)
        gen_lora = torch.Generator().manual_seed(cfg.backbone_seed + 1)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, LoRALinear):
                    bound = 1.0 / math.sqrt(m.lora_a.shape[1])
                    m.lora_a.copy_(torch.rand(m.lora_a.shape, generator=gen_lora) * 2 * bound - bound)
        self.final_norm = nn.LayerNorm(cfg.d_model)
        for p in self.final_norm.parameters():
            p.requires_grad_(False)

    def base_parameters(self) -> dict[str, torch.Tensor]:
        return {
            n: p for n, p in self.named_parameters() if "lora_" not in n
        }

    def forward(self, x: torch.Tensor, adapt: bool, p_drop: float = 0.0) -> list[torch.Tensor]:
        """Hidden state after every layer; the last entry is final-normed."""
        hidden = []
        for layer in self.layers:
            x = layer(x, adapt, p_drop)
            hidden.append(x)
        hidden[-1] = self.final_norm(hidden[-1])
        return hidden


class CrossModalAlignment(nn.Module):
    """Temporal tokens (queries) attend over principal word embeddings."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)

    def forward(self, tokens: torch.Tensor, words: torch.Tensor, return_attention: bool = False):
        *lead, n, d = tokens.shape
        P = words.shape[0]
        hd = d // self.n_heads
        q = self.q(tokens).view(*lead, n, self.n_heads, hd).transpose(-2, -3)
        k = self.k(words).view(P, self.n_heads, hd).transpose(0, 1)
        v = self.v(words).view(P, self.n_heads, hd).transpose(0, 1)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        out = (att @ v).transpose(-2, -3).reshape(*lead, n, d)
        if return_attention:
            return out, att
        return out


@dataclass
class CALFOutput:
    """Raw (scaled-space) branch outputs, all shaped ``S x H x N`` or ``S x N x d``."""

    predictions: torch.Tensor
    hidden: list[torch.Tensor] | None = None
    text_predictions: torch.Tensor | None = None
    text_hidden: list[torch.Tensor] | None = None


class CALF(nn.Module):
    """Channel-as-token CALF forecaster; accepts any number of series."""

    def __init__(self, cfg: CALFConfig):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = nn.Linear(cfg.input_length, cfg.d_model)
        self.backbone = Backbone(cfg)
        words = principal_word_embeddings(self.backbone.vocab.double().numpy(), cfg.n_principal)
        self.register_buffer("principal", torch.as_tensor(words, dtype=torch.float32))
        self.align = CrossModalAlignment(cfg.d_model, cfg.n_heads)
        self.head = nn.Linear(cfg.d_model, cfg.horizon)

    def forward(self, x: torch.Tensor, mode: Literal["train", "infer"] = "infer",
                return_hidden: bool = False) -> CALFOutput:
        if mode not in ("train", "infer"):
            raise ArgumentError(f"mode must be 'train' or 'infer', got {mode!r}")
        if mode == "infer" and return_hidden:
            raise ContractError("branch hidden states exist only in train mode")
        check_inputs(x, None, self.cfg.input_length)
        p_drop = self.cfg.dropout_rate if (mode == "train" and self.training) else 0.0
        tokens = self.tokenizer(x.transpose(1, 2))
        hidden = self.backbone(tokens, adapt=True, p_drop=p_drop)
        pred = self.head(hidden[-1]).transpose(1, 2)
        if mode == "infer":
            return CALFOutput(pred)
        aligned = self.align(tokens, self.principal.to(tokens.dtype))
        text_hidden = self.backbone(aligned, adapt=False, p_drop=p_drop)
        text_pred = self.head(text_hidden[-1]).transpose(1, 2)
        return CALFOutput(pred, hidden, text_pred, text_hidden)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x, mode="infer").predictions


@dataclass
class CALFLoss:
    total: torch.Tensor
    supervised: torch.Tensor
    feature: torch.Tensor
    output: torch.Tensor


def calf_losses(pred_temporal, pred_textual, hidden_temporal, hidden_textual, targets,
                lambda_feature: float, lambda_output: float, delta: float = 1.0) -> CALFLoss:
    """Huber supervision plus feature and output consistency between branches."""
    if len(hidden_temporal) != len(hidden_textual):
        raise ShapeError(
            f"{len(hidden_temporal)} temporal hidden layers vs {len(hidden_textual)} textual"
        )
    if not hidden_temporal:
        raise ShapeError("no hidden layers supplied")
    supervised = huber_loss(pred_temporal, targets, delta)
    feature = torch.stack([mean_abs_diff(a, b) for a, b in zip(hidden_temporal, hidden_textual)]).mean()
    output = mean_abs_diff(pred_temporal, pred_textual)
    total = supervised + lambda_feature * feature + lambda_output * output
    return CALFLoss(total, supervised, feature, output)


class ClusterCALF(nn.Module):
    """One CALF per cluster; predictions scattered back to the full series axis."""

    def __init__(self, assignment: ClusterAssignment, models: Mapping[int, CALF]):
        super().__init__()
        missing = [c for c in range(assignment.k) if c not in models]
        if missing:
            raise ConfigurationError(f"no model for cluster(s) {missing}")
        self.assignment = assignment
        self.members = [assignment.members(c) for c in range(assignment.k)]
        self.models = nn.ModuleDict({str(c): models[c] for c in range(assignment.k)})

    def forward(self, x: torch.Tensor, mode: Literal["infer"] = "infer") -> CALFOutput:
        if mode != "infer":
            raise ContractError("ClusterCALF is trained per cluster; use train_cluster_calf")
        if x.ndim != 3 or x.shape[2] != self.assignment.n_series:
            raise ShapeError(f"expected S x L x {self.assignment.n_series}, got {tuple(x.shape)}")
        S = x.shape[0]
        H = next(iter(self.models.values())).cfg.horizon
        out = x.new_zeros(S, H, x.shape[2])
        for c, idx in enumerate(self.members):
            t = torch.as_tensor(idx, device=x.device)
            out[:, :, t] = self.models[str(c)].predict(x[:, :, t])
        return CALFOutput(out)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x).predictions

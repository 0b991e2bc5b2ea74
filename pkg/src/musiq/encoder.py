"""Pre-LayerNorm Transformer encoder with masked multi-head self-attention."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .numerics import MASK_VALUE, ContractError, NumericError, softmax_lastdim

LN_EPS = 1e-6


def additive_mask(valid: torch.Tensor, dtype=None) -> torch.Tensor:
    """(B, S) validity -> (B, 1, 1, S) additive key mask of 0 / -inf."""
    dtype = dtype or torch.get_default_dtype()
    m = torch.zeros(valid.shape, dtype=dtype)
    m = m.masked_fill(~valid, MASK_VALUE)
    return m[:, None, None, :]


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        if hidden % heads:
            raise ContractError("hidden size must divide evenly into heads")
        self.heads = heads
        self.head_dim = hidden // heads
        self.query = nn.Linear(hidden, hidden)
        self.key = nn.Linear(hidden, hidden)
        self.value = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, hidden)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, S, _ = x.shape
        return x.reshape(B, S, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, z: torch.Tensor, mask: Optional[torch.Tensor] = None):
        """Returns (output, weights); weights are (B, heads, S, S).

        The 1/sqrt(D_h) scaling is applied to QK^T before the mask is added;
        -inf entries make the order irrelevant.
        """
        B, S, _ = z.shape
        if mask is not None and mask.shape[-1] != S:
            raise ContractError(f"mask covers {mask.shape[-1]} slots, sequence has {S}")
        q, k, v = self._split(self.query(z)), self._split(self.key(z)), self._split(self.value(z))
        scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores + mask
        weights = softmax_lastdim(scores, check=False)
        ctx = torch.matmul(weights, v).transpose(1, 2).reshape(B, S, -1)
        return self.out(ctx), weights


class EncoderBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, mlp: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(hidden, eps=LN_EPS)
        self.attn = MultiHeadSelfAttention(hidden, heads)
        self.ln2 = nn.LayerNorm(hidden, eps=LN_EPS)
        self.fc1 = nn.Linear(hidden, mlp)
        self.fc2 = nn.Linear(mlp, hidden)

    def forward(self, z, mask=None):
        a, weights = self.attn(self.ln1(z), mask)
        z = z + a
        z = z + self.fc2(F.gelu(self.fc1(self.ln2(z))))
        return z, weights


@dataclass
class AttentionRecord:
    layers: List[torch.Tensor]  # each (B, heads, S, S)


class TransformerEncoder(nn.Module):
    def __init__(self, depth: int, hidden: int, heads: int, mlp: int):
        super().__init__()
        self.blocks = nn.ModuleList(EncoderBlock(hidden, heads, mlp) for _ in range(depth))
        self.ln_out = nn.LayerNorm(hidden, eps=LN_EPS)

    def forward(self, z: torch.Tensor, valid: Optional[torch.Tensor] = None,
                record: bool = False):
        """Encode a (B, S, D) sequence; returns (CLS state after LN, record or None)."""
        mask = None if valid is None else additive_mask(valid, z.dtype)
        layers = []
        for q, block in enumerate(self.blocks):
            z, weights = block(z, mask)
            if torch.isnan(z).any():
                raise NumericError(f"NaN after encoder layer {q}")
            if record:
                layers.append(weights.detach())
        y = self.ln_out(z[:, 0])
        return y, (AttentionRecord(layers) if record else None)


def stack_parameter_counts(depth: int, hidden: int, mlp: int) -> dict:
    """Closed-form parameter counts for the encoder stack."""
    D = hidden
    weights = depth * (4 * D * D + 2 * D * mlp)
    biases = depth * (4 * D + mlp + D)
    norms = depth * 4 * D + 2 * D
    return {"weights": weights, "biases": biases, "layernorm": norms,
            "total": weights + biases + norms}


def attention_rollout(record: AttentionRecord, valid: torch.Tensor,
                      residual: float = 0.5) -> torch.Tensor:
    """CLS-row relevance over all slots for one sequence.

    Each layer's head-averaged attention is mixed with the identity, restricted
    to valid slots, row-renormalised, and the layers are multiplied in order.
    Returns an (S,) tensor whose slot 0 (CLS) is dropped by callers; padded
    slots are exactly zero.
    """
    valid = valid.reshape(-1)
    S = valid.shape[0]
    keep = valid.to(torch.float64)
    roll = torch.diag(keep)
    eye = torch.eye(S, dtype=torch.float64)
    for weights in record.layers:
        a = weights.reshape(-1, *weights.shape[-3:])[0].to(torch.float64).mean(dim=0)
        a = residual * a + (1 - residual) * eye
        a = a * keep[:, None] * keep[None, :]
        rows = a.sum(dim=-1, keepdim=True)
        a = a / torch.where(rows > 0, rows, torch.ones_like(rows))
        roll = a @ roll
    return roll[0]


def split_relevance(relevance: torch.Tensor, segments: Sequence) -> list:
    """Cut a rollout vector into per-scale (rows, cols) relevance grids."""
    maps = []
    for seg in segments:
        values = torch.zeros(seg.rows * seg.cols, dtype=relevance.dtype)
        values[: seg.n_valid] = relevance[seg.start: seg.start + seg.n_valid]
        maps.append(values.reshape(seg.rows, seg.cols))
    return maps

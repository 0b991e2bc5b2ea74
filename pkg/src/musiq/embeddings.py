"""Patch encoders, hash-based 2D spatial embedding, scale embedding, CLS token."""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import ConfigError, ModelConfig
from .numerics import ContractError, trunc_normal_

GN_GROUPS = 8
PATCH_CHUNK = 2048


def _conv(cin: int, cout: int, k: int, stride: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False)


class PatchEncoder(nn.Module):
    """Maps (N, P, P, C) pixel blocks to (N, D) vectors.

    ``linear`` flattens and projects. ``simple_conv`` is a 7x7/2 conv and a
    3x3 conv; ``resnet5`` adds one residual block of two 3x3 convs on top.
    Every conv is followed by group norm and ReLU (the second conv of the
    residual block adds the shortcut before its ReLU). Conv variants end with
    global average pooling and an affine map to D.
    """

    def __init__(self, variant: str, patch_size: int, hidden: int,
                 channels: int = 64, in_channels: int = 3):
        super().__init__()
        self.variant = variant
        self.patch_size = patch_size
        self.in_channels = in_channels
        if variant == "linear":
            self.proj = nn.Linear(patch_size * patch_size * in_channels, hidden)
            return
        if variant not in ("simple_conv", "resnet5"):
            raise ConfigError(f"unknown patch encoder {variant!r}")
        self.stem1 = _conv(in_channels, channels, 7, 2)
        self.norm1 = nn.GroupNorm(GN_GROUPS, channels)
        self.stem2 = _conv(channels, channels, 3, 1)
        self.norm2 = nn.GroupNorm(GN_GROUPS, channels)
        if variant == "resnet5":
            self.block1 = _conv(channels, channels, 3, 1)
            self.bnorm1 = nn.GroupNorm(GN_GROUPS, channels)
            self.block2 = _conv(channels, channels, 3, 1)
            self.bnorm2 = nn.GroupNorm(GN_GROUPS, channels)
        self.proj = nn.Linear(channels, hidden)

    def forward(self, blocks: torch.Tensor) -> torch.Tensor:
        P, C = self.patch_size, self.in_channels
        if blocks.dim() != 4 or tuple(blocks.shape[1:]) != (P, P, C):
            raise ContractError(
                f"expected (N, {P}, {P}, {C}) blocks, got {tuple(blocks.shape)}")
        if self.variant == "linear":
            return self.proj(blocks.reshape(blocks.shape[0], -1))
        x = blocks.permute(0, 3, 1, 2)
        x = F.relu(self.norm1(self.stem1(x)))
        x = F.relu(self.norm2(self.stem2(x)))
        if self.variant == "resnet5":
            y = F.relu(self.bnorm1(self.block1(x)))
            y = self.bnorm2(self.block2(y))
            x = F.relu(x + y)
        return self.proj(x.mean(dim=(2, 3)))


def hse_index(i, rows, G):
    """Hash a row (or column) index onto the G-cell grid axis.

    ``round_half_away(i * G / rows)`` clamped to ``G - 1``; works on ints and
    integer numpy/torch arrays using exact integer arithmetic.
    """
    t = (2 * i * G + rows) // (2 * rows)
    if isinstance(t, torch.Tensor):
        return t.clamp(0, G - 1)
    if isinstance(t, np.ndarray):
        return np.clip(t, 0, G - 1)
    return min(max(int(t), 0), G - 1)


def hse_lookup(i: int, j: int, rows: int, cols: int, table: torch.Tensor) -> torch.Tensor:
    if not (0 <= i < rows and 0 <= j < cols):
        raise ContractError(f"patch ({i}, {j}) outside a {rows}x{cols} grid")
    G = table.shape[0]
    return table[hse_index(i, rows, G), hse_index(j, cols, G)]


def sinusoid_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved sin/cos encodings; frequencies 10000^(-2k/dim)."""
    k = np.arange(dim // 2, dtype=np.float64)
    freq = 1.0 / (10000.0 ** (2.0 * k / dim))
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freq[None, :]
    out = np.empty((len(positions), dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def hse_sinusoidal_table(G: int, D: int) -> np.ndarray:
    """Fixed G x G x D table: row encoding in the first D/2 dims, column in the rest."""
    if D % 4:
        raise ConfigError("sinusoidal table needs D divisible by 4")
    enc = sinusoid_1d(np.arange(G), D // 2)
    table = np.empty((G, G, D), dtype=np.float64)
    table[:, :, : D // 2] = enc[:, None, :]
    table[:, :, D // 2:] = enc[None, :, :]
    return table


def cosine_similarity_grid(table: np.ndarray) -> np.ndarray:
    """(G, G, G, G) array: [i, j] holds cos(T[i, j], T[a, b]) over all (a, b)."""
    G = table.shape[0]
    flat = table.reshape(G * G, -1).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    unit = flat / np.where(norms == 0, 1.0, norms)
    return (unit @ unit.T).reshape(G, G, G, G)


class InputEmbedding(nn.Module):
    """Patch encoder plus spatial, scale and CLS embeddings."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D, G = cfg.hidden, cfg.grid_size
        self.patch_encoder = PatchEncoder(cfg.patch_encoder, cfg.patch_size, D,
                                          cfg.conv_channels)
        self.cls = nn.Parameter(torch.zeros(D))
        self.scale_table = nn.Parameter(torch.zeros(cfg.num_scales + 1, D))
        self.mode = cfg.spatial
        if self.mode == "hse_learned":
            self.hse = nn.Parameter(torch.zeros(G, G, D))
        elif self.mode == "hse_sinusoidal":
            table = torch.as_tensor(hse_sinusoidal_table(G, D),
                                    dtype=torch.get_default_dtype())
            self.register_buffer("hse", table, persistent=False)
        elif self.mode == "fixed_length":
            positions = (cfg.max_patches if cfg.include_native else 0) + sum(cfg.capacities)
            self.pos_table = nn.Parameter(torch.zeros(positions, D))
        elif self.mode != "none":
            raise ConfigError(f"unknown spatial mode {self.mode!r}")

    def spatial_table(self) -> Optional[torch.Tensor]:
        return self.hse if self.mode in ("hse_learned", "hse_sinusoidal") else None

    def encode_patches(self, pixels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(B, S, P, P, C) -> (B, S, D); only valid non-CLS slots are encoded."""
        B, S = mask.shape
        slots = mask.clone()
        slots[:, 0] = False
        flat = slots.reshape(-1)
        idx = torch.nonzero(flat).squeeze(1)
        blocks = pixels.reshape(B * S, *pixels.shape[2:])[idx]
        # bounded peak memory for large multi-image batches
        enc = torch.cat([self.patch_encoder(c) for c in blocks.split(PATCH_CHUNK)], dim=0) \
            if len(blocks) else self.patch_encoder(blocks)
        out = enc.new_zeros(B * S, enc.shape[-1])
        out = out.index_copy(0, idx, enc)
        return out.reshape(B, S, -1)

    def forward(self, batch: dict) -> torch.Tensor:
        mask = batch["mask"]
        x = self.encode_patches(batch["pixels"], mask)
        B, S, D = x.shape
        tokens = mask.clone()
        tokens[:, 0] = False
        scale_ids = batch["scale_ids"].clamp(min=0)
        x = x + self.scale_table[scale_ids]
        table = self.spatial_table()
        if table is not None:
            G = table.shape[0]
            grid = batch["grid"].clamp(min=1)
            coords = batch["coords"].clamp(min=0)
            ti = hse_index(coords[..., 0], grid[..., 0], G)
            tj = hse_index(coords[..., 1], grid[..., 1], G)
            x = x + table[ti, tj]
        elif self.mode == "fixed_length":
            x = x + self.pos_table[batch["pos_ids"].clamp(min=0)]
        x = x * tokens.unsqueeze(-1).to(x.dtype)
        cls = self.cls.expand(B, 1, D)
        return torch.cat([cls, x[:, 1:]], dim=1)

    def init_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif ".norm" in name or ".bnorm" in name:
                nn.init.ones_(p)
            else:
                trunc_normal_(p, 0.02, generator)

"""The full multi-scale quality model: tokens -> embeddings -> encoder -> head."""
from __future__ import annotations

from typing import Dict, Sequence

import numpy as np
import torch
from torch import nn

from . import tokenizer
from .config import ModelConfig
from .embeddings import InputEmbedding
from .encoder import TransformerEncoder
from .heads import QualityHead, mean_score
from .numerics import trunc_normal_


def to_batch(layouts: Sequence[tokenizer.TokenLayout], dtype=None) -> Dict[str, torch.Tensor]:
    arrays = tokenizer.collate(layouts)
    dtype = dtype or torch.get_default_dtype()
    out = {k: torch.from_numpy(v) for k, v in arrays.items()}
    out["pixels"] = out["pixels"].to(dtype)
    return out


class MusiqModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = InputEmbedding(cfg)
        self.encoder = TransformerEncoder(cfg.depth, cfg.hidden, cfg.heads, cfg.mlp)
        self.head = QualityHead(cfg.head, cfg.hidden, cfg.buckets)

    def init_parameters(self, seed: int = 0) -> "MusiqModel":
        """Truncated-normal (std 0.02) weights, zero biases, unit norm scales.

        The quality head stays zero so a fresh model predicts 0 (or uniform).
        """
        gen = torch.Generator().manual_seed(seed)
        self.embed.init_parameters(gen)
        for name, p in self.encoder.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif ".ln" in name or name.startswith("ln_"):
                nn.init.ones_(p)
            else:
                trunc_normal_(p, 0.02, gen)
        nn.init.zeros_(self.head.fc.weight)
        nn.init.zeros_(self.head.fc.bias)
        return self

    def features(self, batch: Dict[str, torch.Tensor], record: bool = False):
        z0 = self.embed(batch)
        return self.encoder(z0, batch["mask"], record=record)

    def forward(self, batch: Dict[str, torch.Tensor]) -> torch.Tensor:
        y, _ = self.features(batch)
        return self.head(y)

    def tokenize(self, img: np.ndarray, pad: bool = True,
                 single_scale: bool = False) -> tokenizer.TokenLayout:
        cfg = self.cfg
        scales = [] if single_scale else cfg.scales
        if single_scale and not cfg.include_native:
            raise ValueError("single-scale scoring needs the native image in the model")
        return tokenizer.tokenize(img, cfg.patch_size, scales, cfg.max_patches,
                                  include_native=cfg.include_native, pad=pad)

    @torch.no_grad()
    def predict_images(self, images: Sequence[np.ndarray], pad: bool = False,
                       single_scale: bool = False) -> torch.Tensor:
        """Predictions for each image; unpadded inputs are run one at a time."""
        if pad:
            layouts = [self.tokenize(im, pad=True, single_scale=single_scale) for im in images]
            return self(to_batch(layouts))
        outs = [self(to_batch([self.tokenize(im, pad=False, single_scale=single_scale)]))
                for im in images]
        return torch.cat(outs, dim=0)

    def scores(self, preds: torch.Tensor) -> torch.Tensor:
        """Scalar quality per image (distribution heads report the mean bucket)."""
        return preds if self.cfg.head == "scalar" else mean_score(preds)

"""Quality heads and losses."""
from __future__ import annotations

import torch
from torch import nn

from .numerics import ContractError, softmax_lastdim

NORM_TOL = 1e-6


class QualityHead(nn.Module):
    """Affine map from the CLS state to a score (``scalar``) or B logits."""

    def __init__(self, kind: str, hidden: int, buckets: int = 10):
        super().__init__()
        if kind not in ("scalar", "distribution"):
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.buckets = buckets
        self.fc = nn.Linear(hidden, 1 if kind == "scalar" else buckets)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        out = self.fc(y)
        if self.kind == "scalar":
            return out.squeeze(-1)
        return softmax_lastdim(out)


def mean_score(dist: torch.Tensor) -> torch.Tensor:
    """Expected bucket value with buckets numbered 1..B."""
    B = dist.shape[-1]
    buckets = torch.arange(1, B + 1, dtype=dist.dtype)
    return (dist * buckets).sum(dim=-1)


def _check_normalized(p: torch.Tensor, name: str) -> None:
    if (p < -NORM_TOL).any():
        raise ContractError(f"{name} has negative entries")
    sums = p.detach().sum(dim=-1)
    if (sums - 1).abs().max() > NORM_TOL:
        raise ContractError(f"{name} is not normalised (sums {sums.tolist()})")


def emd_loss(p: torch.Tensor, p_hat: torch.Tensor, r: float = 2.0,
             reduce: bool = True) -> torch.Tensor:
    """Earth mover's distance between cumulative score distributions.

    ``((1/B) * sum_m |CDF_p(m) - CDF_phat(m)|^r) ** (1/r)`` per row, averaged
    over the batch when ``reduce``. The gradient is zero where the distance is
    exactly zero.
    """
    if p.shape != p_hat.shape:
        raise ContractError(f"bucket shapes differ: {tuple(p.shape)} vs {tuple(p_hat.shape)}")
    _check_normalized(p, "target")
    _check_normalized(p_hat, "prediction")
    diff = torch.cumsum(p, dim=-1) - torch.cumsum(p_hat, dim=-1)
    inner = diff.abs().pow(r).mean(dim=-1)
    positive = inner > 0
    safe = torch.where(positive, inner, torch.ones_like(inner))
    dist = torch.where(positive, safe.pow(1.0 / r), torch.zeros_like(inner))
    return dist.mean() if reduce else dist


def l1_loss(pred: torch.Tensor, target: torch.Tensor, reduce: bool = True) -> torch.Tensor:
    err = (pred - target).abs()
    return err.mean() if reduce else err

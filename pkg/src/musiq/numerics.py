"""Array arithmetic, reverse-mode gradients, optimizers and schedules.

Tensors are ``torch.Tensor`` values; torch's autograd tape is recorded per
forward pass and released by :func:`backward`. Everything else in the package
computes on top of the helpers defined here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Tuple

import torch
from torch import nn

Gradients = Dict[str, torch.Tensor]

MASK_VALUE = float("-inf")


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class ContractError(ValueError):
    pass


def set_default_precision(double: bool) -> None:
    """Switch the default float dtype (float64 for gradient verification)."""
    torch.set_default_dtype(torch.float64 if double else torch.float32)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1:
        raise DimensionError("matmul needs at least 1-d operands")
    inner_b = b.shape[-2] if b.dim() > 1 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise DimensionError(
            f"inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return torch.matmul(a, b)


def softmax_lastdim(x: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Max-subtracted softmax over the last axis.

    Entries equal to ``-inf`` receive exactly zero weight. A slice that is
    entirely ``-inf`` is an error (there is nothing to normalise over).
    """
    if x.shape[-1] == 0:
        raise DimensionError("softmax over an empty last dimension")
    if check and torch.isnan(x).any():
        raise NumericError("NaN in softmax input")
    peak = x.amax(dim=-1, keepdim=True)
    if check and torch.isinf(peak).any():
        raise NumericError("softmax slice has no finite entry")
    e = torch.exp(x - peak.detach())
    return e / e.sum(dim=-1, keepdim=True)


def backward(loss: torch.Tensor,
             params: Mapping[str, torch.Tensor]) -> Gradients:
    """Return d(loss)/d(param) for every named parameter.

    Parameters that do not take part in the recorded computation get zero
    gradients. The tape is freed afterwards.
    """
    if loss.numel() != 1:
        raise ContractError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    out: Gradients = {}
    for name, p, g in zip(names, tensors, grads):
        out[name] = torch.zeros_like(p) if g is None else g.detach()
    return out


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """base * 0.5 * (1 + cos(pi * step / total_steps)), clamped at the end."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step, 0), total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def trunc_normal_(t: torch.Tensor, std: float = 0.02,
                  generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Truncated normal at two standard deviations."""
    with torch.no_grad():
        return nn.init.trunc_normal_(t, mean=0.0, std=std, a=-2 * std, b=2 * std,
                                     generator=generator)


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0
    total_steps: int = 0
    schedule: str = "cosine"
    step_count: int = 0
    moments: Dict[str, Tuple[torch.Tensor, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def learning_rate(self, step: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return cosine_lr(self.lr, step, self.total_steps)


def optimizer_step(state: OptimizerState, params: Mapping[str, torch.Tensor],
                   grads: Mapping[str, torch.Tensor],
                   step: Optional[int] = None) -> float:
    """Update ``params`` in place from ``grads``; returns the learning rate used.

    Adam uses bias correction and decoupled weight decay. SGD keeps a
    velocity ``v <- m*v + g`` and applies ``theta <- theta - lr*v``.
    """
    if step is None:
        step = state.step_count
    if step < 0:
        raise ContractError("step must be non-negative")
    missing = [n for n in params if n not in grads]
    if missing:
        raise ContractError(f"missing gradients for {missing[:3]}")
    lr = state.learning_rate(step)
    state.step_count += 1
    t = state.step_count
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ContractError(f"gradient shape mismatch for {name}")
            if state.kind == "adam":
                if name not in state.moments:
                    state.moments[name] = (torch.zeros_like(p), torch.zeros_like(p))
                m, v = state.moments[name]
                m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
                v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
                m_hat = m / (1 - state.beta1 ** t)
                v_hat = v / (1 - state.beta2 ** t)
                if state.weight_decay:
                    p.mul_(1 - lr * state.weight_decay)
                p.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))
            else:
                if name not in state.moments:
                    state.moments[name] = (torch.zeros_like(p),)
                (vel,) = state.moments[name]
                d = g + state.weight_decay * p if state.weight_decay else g
                vel.mul_(state.momentum).add_(d)
                p.sub_(lr * vel)
    return lr


def named_trainable(module: nn.Module) -> Dict[str, torch.Tensor]:
    return {n: p for n, p in module.named_parameters() if p.requires_grad}


def count_params(params: Iterable[torch.Tensor]) -> int:
    return sum(p.numel() for p in params)

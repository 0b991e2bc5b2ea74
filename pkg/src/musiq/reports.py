"""Parameter accounting and analytic compute estimates."""
from __future__ import annotations

import math
from typing import Dict, List, Tuple

from .config import ModelConfig
from .encoder import stack_parameter_counts
from .imaging import resized_extent
from .model import MusiqModel


def parameter_report(model: MusiqModel) -> List[Tuple[str, int]]:
    """Exact trainable-parameter counts grouped by component."""
    groups: Dict[str, int] = {}

    def add(key, n):
        groups[key] = groups.get(key, 0) + n

    for name, p in model.named_parameters():
        n = p.numel()
        if name.startswith("embed.patch_encoder"):
            add("patch_encoder", n)
        elif name == "embed.hse":
            add("spatial_hse", n)
        elif name == "embed.pos_table":
            add("spatial_fixed_length", n)
        elif name == "embed.scale_table":
            add("scale_embedding", n)
        elif name == "embed.cls":
            add("cls_token", n)
        elif name.startswith("encoder."):
            if ".ln" in name or name.startswith("encoder.ln_out"):
                add("encoder_layernorm", n)
            elif name.endswith("bias"):
                add("encoder_bias", n)
            else:
                add("encoder_weight", n)
        elif name.startswith("head."):
            add("head", n)
        else:
            add("other", n)
    rows = list(groups.items())
    rows.append(("total", sum(groups.values())))
    return rows


def _conv_macs(size: int, k: int, stride: int, cin: int, cout: int) -> Tuple[int, int]:
    out = math.ceil(size / stride)
    return out, out * out * k * k * cin * cout


def patch_encoder_macs(cfg: ModelConfig) -> int:
    P, C, D = cfg.patch_size, 3, cfg.hidden
    if cfg.patch_encoder == "linear":
        return P * P * C * D
    ch = cfg.conv_channels
    size, macs = _conv_macs(P, 7, 2, C, ch)
    size, m = _conv_macs(size, 3, 1, ch, ch)
    macs += m
    if cfg.patch_encoder == "resnet5":
        macs += 2 * _conv_macs(size, 3, 1, ch, ch)[1]
    return macs + ch * D


def token_counts(cfg: ModelConfig, height: int, width: int,
                 single_scale: bool = True) -> List[int]:
    P = cfg.patch_size
    counts = []
    if cfg.include_native:
        counts.append(min(math.ceil(height / P) * math.ceil(width / P), cfg.max_patches))
    if not single_scale:
        for L in cfg.scales:
            h, w, _ = resized_extent(height, width, L)
            counts.append(math.ceil(h / P) * math.ceil(w / P))
    return counts


def mac_estimate(cfg: ModelConfig, height: int = 224, width: int = 224,
                 single_scale: bool = True) -> Dict[str, int]:
    """Multiply-accumulates for one unpadded forward pass."""
    patches = sum(token_counts(cfg, height, width, single_scale))
    N = patches + 1
    D, M = cfg.hidden, cfg.mlp
    per_layer = 4 * N * D * D + 2 * N * D * M + 2 * N * N * D
    out = {
        "tokens": N,
        "patch_encoder": patches * patch_encoder_macs(cfg),
        "encoder": cfg.depth * per_layer,
        "head": D * (1 if cfg.head == "scalar" else cfg.buckets),
    }
    out["total_macs"] = out["patch_encoder"] + out["encoder"] + out["head"]
    out["flops"] = 2 * out["total_macs"]
    return out


def stack_formula(cfg: ModelConfig) -> Dict[str, int]:
    return stack_parameter_counts(cfg.depth, cfg.hidden, cfg.mlp)


def summary_lines(model: MusiqModel, height: int, width: int,
                  single_scale: bool) -> List[str]:
    cfg = model.cfg
    lines = ["section,item,value"]
    for name, n in parameter_report(model):
        lines.append(f"params,{name},{n}")
    formula = stack_formula(cfg)
    for key in ("weights", "biases", "layernorm", "total"):
        lines.append(f"stack_formula,{key},{formula[key]}")
    est = mac_estimate(cfg, height, width, single_scale)
    lines.append(f"compute,resolution,{height}x{width}")
    lines.append(f"compute,scales,{'single' if single_scale else 'multi'}")
    for key in ("tokens", "patch_encoder", "encoder", "head", "total_macs", "flops"):
        lines.append(f"compute,{key},{est[key]}")
    return lines

"""Attention-rollout maps and spatial-embedding similarity grids."""
from __future__ import annotations

from pathlib import Path
from typing import List, Tuple

import numpy as np
import torch

from . import imaging, plotting
from .embeddings import cosine_similarity_grid
from .encoder import attention_rollout, split_relevance
from .model import MusiqModel, to_batch


class ModeError(ValueError):
    pass


def scale_name(scale: int, cfg) -> str:
    return "native" if scale == 0 else f"L{cfg.scales[scale - 1]}"


@torch.no_grad()
def attention_maps(model: MusiqModel, img: np.ndarray,
                   single_scale: bool = False) -> List[Tuple[str, np.ndarray]]:
    """Per-scale rollout relevance upsampled (nearest) to the padded scale extents."""
    layout = model.tokenize(img, pad=False, single_scale=single_scale)
    batch = to_batch([layout])
    _, record = model.features(batch, record=True)
    relevance = attention_rollout(record, batch["mask"][0])
    P = model.cfg.patch_size
    out = []
    for seg, grid in zip(layout.segments, split_relevance(relevance, layout.segments)):
        up = np.kron(grid.numpy(), np.ones((P, P)))
        out.append((scale_name(seg.scale, model.cfg), up))
    return out


def to_gray(values: np.ndarray) -> np.ndarray:
    peak = float(values.max()) if values.size else 0.0
    scaled = values / peak if peak > 0 else np.zeros_like(values)
    return np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)


def export_attention(model: MusiqModel, img: np.ndarray, out_dir,
                     single_scale: bool = False, figure: bool = True) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = attention_maps(model, img, single_scale)
    paths = []
    for name, values in maps:
        path = out_dir / f"map_{name}.png"
        imaging.save_gray(path, to_gray(values))
        paths.append(path)
    if figure:
        plotting.plot_attention(img, [m for _, m in maps], [n for n, _ in maps],
                                out_dir / "figure_attention.png")
    return paths


def hse_similarity_image(table: np.ndarray) -> np.ndarray:
    """(G*G, G*G) uint8 mosaic; tile (i, j) is cos(T[i, j], T) mapped [-1, 1] -> [0, 255]."""
    G = table.shape[0]
    sim = cosine_similarity_grid(table)
    mosaic = sim.transpose(0, 2, 1, 3).reshape(G * G, G * G)
    return np.clip(np.rint((mosaic + 1.0) * 127.5), 0, 255).astype(np.uint8)


def export_hse(model: MusiqModel, out_dir, figure: bool = True) -> Path:
    table = model.embed.spatial_table()
    if table is None:
        raise ModeError(f"spatial mode {model.cfg.spatial!r} has no hash grid")
    arr = table.detach().cpu().numpy()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "hse_grid.png"
    imaging.save_gray(path, hse_similarity_image(arr))
    if figure:
        plotting.plot_hse_similarity(cosine_similarity_grid(arr), out_dir / "figure_hse.png",
                                     title=f"G={arr.shape[0]} {model.cfg.spatial}")
    return path

"""Patch extraction and fixed-capacity token layouts for multi-scale input.

Slot order is ``[CLS, native patches, scale-1 patches, ..., scale-K patches]``.
The native segment holds at most ``l`` patches (raster-order prefix); each
resized segment has capacity ``ceil(L_k / P) ** 2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import imaging
from .numerics import ContractError

SENTINEL = -1


@dataclass
class PatchGrid:
    scale: int
    rows: int
    cols: int
    patches: np.ndarray  # (rows*cols, P, P, C)
    coords: np.ndarray   # (rows*cols, 2), (row, col)

    def __len__(self) -> int:
        return self.rows * self.cols


@dataclass
class Segment:
    scale: int
    start: int
    capacity: int
    rows: int
    cols: int
    n_valid: int


@dataclass
class TokenLayout:
    pixels: np.ndarray     # (S, P, P, C) float32; zero for CLS and padding
    scale_ids: np.ndarray  # (S,) int64; SENTINEL for CLS and padding
    coords: np.ndarray     # (S, 2) int64; SENTINEL for CLS and padding
    grid: np.ndarray       # (S, 2) int64 rows/cols of the owning grid; 0 if none
    pos_ids: np.ndarray    # (S,) int64 index into a fixed-length table
    mask: np.ndarray       # (S,) bool, True = valid
    segments: List[Segment] = field(default_factory=list)

    @property
    def length(self) -> int:
        return int(self.mask.shape[0])

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def capacity_for(L: int, P: int) -> int:
    side = -(-L // P)
    return side * side


def extract_patches(img: np.ndarray, P: int, scale: int) -> PatchGrid:
    """Split an image whose extents are multiples of ``P`` into raster-order patches."""
    H, W = img.shape[:2]
    if H % P or W % P:
        raise ContractError(f"image {H}x{W} is not padded to a multiple of {P}")
    rows, cols = H // P, W // P
    C = img.shape[2]
    blocks = img.reshape(rows, P, cols, P, C).transpose(0, 2, 1, 3, 4)
    patches = blocks.reshape(rows * cols, P, P, C).copy()
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    coords = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.int64)
    return PatchGrid(scale, rows, cols, patches, coords)


def build_layout(native: Optional[PatchGrid], variants: Sequence[PatchGrid],
                 l: int, capacities: Sequence[int], pad: bool = True) -> TokenLayout:
    """Arrange patch grids into slots behind a CLS slot.

    With ``pad=False`` every segment is sized to its actual patch count
    (native still cut at ``l``). Fixed-length position ids always use the
    nominal capacities so they agree between padded and unpadded layouts.
    """
    if len(capacities) != len(variants):
        raise ContractError("one capacity per resized variant is required")
    grids = ([(native, l)] if native is not None else []) + list(zip(variants, capacities))
    if not grids:
        raise ContractError("layout needs at least one scale")

    P = grids[0][0].patches.shape[1]
    C = grids[0][0].patches.shape[3]
    plan = []
    nominal = 0
    for grid, cap in grids:
        n = min(len(grid), cap)
        if grid is not native and len(grid) > cap:
            raise ContractError(
                f"scale {grid.scale} has {len(grid)} patches, capacity {cap}")
        plan.append((grid, cap if pad else n, n, nominal))
        nominal += cap

    S = 1 + sum(p[1] for p in plan)
    pixels = np.zeros((S, P, P, C), dtype=np.float32)
    scale_ids = np.full(S, SENTINEL, dtype=np.int64)
    coords = np.full((S, 2), SENTINEL, dtype=np.int64)
    gdims = np.zeros((S, 2), dtype=np.int64)
    pos_ids = np.full(S, SENTINEL, dtype=np.int64)
    mask = np.zeros(S, dtype=bool)
    mask[0] = True
    segments = []
    start = 1
    for grid, size, n, offset in plan:
        sl = slice(start, start + n)
        pixels[sl] = grid.patches[:n]
        scale_ids[sl] = grid.scale
        coords[sl] = grid.coords[:n]
        gdims[sl] = (grid.rows, grid.cols)
        pos_ids[sl] = offset + np.arange(n)
        mask[sl] = True
        segments.append(Segment(grid.scale, start, size, grid.rows, grid.cols, n))
        start += size
    return TokenLayout(pixels, scale_ids, coords, gdims, pos_ids, mask, segments)


def tokenize(img: np.ndarray, P: int, scales: Sequence[int], l: int,
             include_native: bool = True, pad: bool = True) -> TokenLayout:
    """Multi-scale representation -> padded patch grids -> token layout."""
    rep = imaging.multiscale(img, scales)
    native = None
    if include_native:
        native = extract_patches(imaging.pad_to_patch_multiple(rep.native, P), P, 0)
    variants = [
        extract_patches(imaging.pad_to_patch_multiple(v.image, P), P, k + 1)
        for k, v in enumerate(rep.variants)
    ]
    caps = [capacity_for(L, P) for L in scales]
    return build_layout(native, variants, l, caps, pad=pad)


def collate(layouts: Sequence[TokenLayout]) -> dict:
    """Stack equal-length layouts into batch arrays."""
    lengths = {t.length for t in layouts}
    if len(lengths) != 1:
        raise ContractError(f"layouts differ in length: {sorted(lengths)}")
    return {
        "pixels": np.stack([t.pixels for t in layouts]),
        "scale_ids": np.stack([t.scale_ids for t in layouts]),
        "coords": np.stack([t.coords for t in layouts]),
        "grid": np.stack([t.grid for t in layouts]),
        "pos_ids": np.stack([t.pos_ids for t in layouts]),
        "mask": np.stack([t.mask for t in layouts]),
    }


def describe(layout: TokenLayout) -> List[str]:
    lines = [f"slots={layout.length} valid={layout.n_valid}"]
    for seg in layout.segments:
        name = "native" if seg.scale == 0 else f"scale{seg.scale}"
        lines.append(
            f"{name}: grid={seg.rows}x{seg.cols} patches={seg.rows * seg.cols} "
            f"kept={seg.n_valid} capacity={seg.capacity} start={seg.start}")
    return lines

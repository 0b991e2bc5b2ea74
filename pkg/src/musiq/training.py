"""Manifests, the fine-tuning loop and evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TextIO, Union

import numpy as np
import torch

from . import imaging, metrics
from .config import ModelConfig
from .heads import emd_loss, l1_loss, mean_score
from .model import MusiqModel, to_batch
from .numerics import OptimizerState, backward, named_trainable, optimizer_step

log = logging.getLogger(__name__)


class ManifestError(ValueError):
    pass


class RunError(RuntimeError):
    pass


@dataclass
class ManifestEntry:
    path: Path
    label: Union[float, np.ndarray]

    @property
    def is_distribution(self) -> bool:
        return isinstance(self.label, np.ndarray)


def read_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    """Parse ``path,mos`` or ``path,d1,...,dB`` CSV; paths resolve against the manifest dir."""
    path = Path(path)
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if not header or header[0] != "path":
            raise ManifestError(f"{path}: first column must be 'path'")
        cols = header[1:]
        if cols == ["mos"]:
            dist = False
        elif cols and all(c == f"d{i + 1}" for i, c in enumerate(cols)):
            dist = True
        else:
            raise ManifestError(f"{path}: expected 'path,mos' or 'path,d1,...,dB' header")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            img_path = Path(row[0].strip())
            if not img_path.is_absolute():
                img_path = base / img_path
            if dist:
                hist = np.asarray(values, dtype=np.float64)
                if (hist < 0).any() or hist.sum() <= 0:
                    raise ManifestError(f"{path}:{lineno}: histogram needs non-negative counts")
                entries.append(ManifestEntry(img_path, hist / hist.sum()))
            else:
                entries.append(ManifestEntry(img_path, values[0]))
    if not entries:
        raise ManifestError(f"{path}: no entries")
    return entries


def write_manifest(path: Union[str, Path], entries: Sequence[ManifestEntry]) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if entries and entries[0].is_distribution:
            B = len(entries[0].label)
            writer.writerow(["path"] + [f"d{i + 1}" for i in range(B)])
            for e in entries:
                writer.writerow([str(e.path)] + [repr(float(v)) for v in e.label])
        else:
            writer.writerow(["path", "mos"])
            for e in entries:
                writer.writerow([str(e.path), repr(float(e.label))])


@dataclass
class TrainConfig:
    loss: str = "l1"
    r: float = 2.0
    epochs: int = 10
    batch_size: int = 16
    max_steps: Optional[int] = None
    optimizer: str = "sgd_momentum"
    lr: float = 1e-4
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "cosine"
    hflip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("l1", "emd"):
            raise ValueError("loss must be 'l1' or 'emd'")
        if self.epochs < 0 or self.batch_size < 1 or self.r <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and r > 0 required")

    def total_steps(self, n_examples: int) -> int:
        per_epoch = math.ceil(n_examples / self.batch_size)
        total = self.epochs * per_epoch
        return total if self.max_steps is None else min(total, self.max_steps)


@dataclass
class TrainResult:
    model: MusiqModel
    steps: int
    history: List[dict] = field(default_factory=list)
    skipped: int = 0


class _ImageCache:
    """Decoded images and token layouts, keyed by (index, flipped)."""

    def __init__(self, entries, model: MusiqModel):
        self.entries = entries
        self.model = model
        self.images: Dict[int, Optional[np.ndarray]] = {}
        self.layouts: Dict[tuple, object] = {}
        self.warned = set()

    def image(self, i: int) -> Optional[np.ndarray]:
        if i not in self.images:
            try:
                self.images[i] = imaging.load_image(self.entries[i].path)
            except imaging.DecodeError as exc:
                self.images[i] = None
                if i not in self.warned:
                    log.warning("skipping %s: %s", self.entries[i].path, exc)
                    self.warned.add(i)
        return self.images[i]

    def layout(self, i: int, flipped: bool):
        key = (i, flipped)
        if key not in self.layouts:
            img = self.image(i)
            if img is None:
                return None
            if flipped:
                img = imaging.hflip(img)
            self.layouts[key] = self.model.tokenize(img, pad=True)
        return self.layouts[key]


def _targets(entries: Sequence[ManifestEntry], dtype) -> torch.Tensor:
    if entries[0].is_distribution:
        return torch.as_tensor(np.stack([e.label for e in entries]), dtype=dtype)
    return torch.as_tensor([float(e.label) for e in entries], dtype=dtype)


def _check_labels(entries: Sequence[ManifestEntry], cfg: ModelConfig, loss: str) -> None:
    kinds = {e.is_distribution for e in entries}
    if len(kinds) != 1:
        raise ManifestError("manifest mixes scalar and histogram labels")
    dist = kinds.pop()
    if dist != (cfg.head == "distribution"):
        raise ManifestError(f"{'histogram' if dist else 'scalar'} labels do not fit a "
                            f"{cfg.head} head")
    if (loss == "emd") != dist:
        raise ManifestError(f"loss {loss!r} does not fit {'histogram' if dist else 'scalar'} labels")
    if dist and any(len(e.label) != cfg.buckets for e in entries):
        raise ManifestError(f"histograms must have {cfg.buckets} buckets")


def compute_loss(model: MusiqModel, batch, targets, tcfg: TrainConfig) -> torch.Tensor:
    preds = model(batch)
    if tcfg.loss == "emd":
        return emd_loss(targets, preds, tcfg.r)
    return l1_loss(preds, targets)


def train(entries: Sequence[ManifestEntry], model: MusiqModel, tcfg: TrainConfig,
          log_stream: Optional[TextIO] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Fine-tune ``model`` in place on the manifest entries.

    Each step tokenizes images at native resolution (with optional horizontal
    flip), pads them to the shared layout, and applies one optimizer update
    under the configured learning-rate schedule.
    """
    if not entries:
        raise ManifestError("empty manifest")
    _check_labels(entries, model.cfg, tcfg.loss)
    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    total = tcfg.total_steps(len(entries))
    state = OptimizerState(kind=tcfg.optimizer, lr=tcfg.lr, beta1=tcfg.beta1,
                           beta2=tcfg.beta2, eps=tcfg.eps, momentum=tcfg.momentum,
                           weight_decay=tcfg.weight_decay, total_steps=total,
                           schedule=tcfg.schedule)
    params = named_trainable(model)
    cache = _ImageCache(entries, model)
    dtype = next(model.parameters()).dtype
    result = TrainResult(model, 0)
    step = 0
    model.train()
    for epoch in range(tcfg.epochs):
        if step >= total:
            break
        order = rng.permutation(len(entries))
        flips = rng.random(len(entries)) < 0.5 if tcfg.hflip else np.zeros(len(entries), bool)
        losses, seen, skipped = [], 0, 0
        lr = state.learning_rate(step)
        for start in range(0, len(order), tcfg.batch_size):
            if step >= total:
                break
            idx = order[start:start + tcfg.batch_size]
            layouts, batch_entries = [], []
            for i in idx:
                lay = cache.layout(int(i), bool(flips[i]))
                if lay is None:
                    skipped += 1
                    continue
                layouts.append(lay)
                batch_entries.append(entries[int(i)])
            if not layouts:
                continue
            batch = to_batch(layouts, dtype)
            loss = compute_loss(model, batch, _targets(batch_entries, dtype), tcfg)
            grads = backward(loss, params)
            lr = optimizer_step(state, params, grads, step)
            step += 1
            losses.append(float(loss.detach()) * len(layouts))
            seen += len(layouts)
        if seen == 0:
            raise RunError(f"epoch {epoch}: every image failed to decode")
        result.skipped += skipped
        row = {"epoch": epoch, "step": step, "lr": lr, "loss": sum(losses) / seen}
        result.history.append(row)
        if log_stream is not None:
            log_stream.write(f"{epoch},{step},{lr:.6g},{row['loss']:.6f}\n")
            log_stream.flush()
        if on_epoch is not None:
            on_epoch(row)
    result.steps = step
    model.eval()
    return result


def label_scores(entries: Sequence[ManifestEntry]) -> np.ndarray:
    if entries[0].is_distribution:
        return np.array([float(mean_score(torch.as_tensor(e.label))) for e in entries])
    return np.array([float(e.label) for e in entries])


def evaluate(entries: Sequence[ManifestEntry], model: MusiqModel,
             single_scale: bool = False) -> dict:
    """Score each image unpadded, one at a time, and compare with the labels."""
    if not entries:
        raise ManifestError("empty manifest")
    kept, preds = [], []
    skipped = 0
    model.eval()
    for e in entries:
        try:
            img = imaging.load_image(e.path)
        except imaging.DecodeError as exc:
            log.warning("skipping %s: %s", e.path, exc)
            skipped += 1
            continue
        out = model.predict_images([img], pad=False, single_scale=single_scale)
        preds.append(float(model.scores(out)[0]))
        kept.append(e)
    if len(kept) < 2:
        raise RunError("evaluation needs at least two decodable images")
    truth = label_scores(kept)
    pred = np.asarray(preds)
    report = {
        "n": len(kept),
        "skipped": skipped,
        "srcc": metrics.spearman(pred, truth),
        "plcc": metrics.pearson(pred, truth),
        "mse": metrics.mse(pred, truth),
        "degenerate": metrics.is_degenerate(pred, truth),
        "predictions": pred,
        "labels": truth,
        "paths": [str(e.path) for e in kept],
    }
    if kept[0].is_distribution:
        report["cls_acc"] = metrics.binary_accuracy(pred, truth, 5.0)
    return report

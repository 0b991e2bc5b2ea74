"""Self-describing single-file checkpoints.

Layout::

    MUSIQ1\\n
    <header byte length, decimal>\\n
    <JSON header: config, metadata, tensor index>
    <raw little-endian payload, tensors in index order>

The header is serialised with sorted keys and no whitespace so that
save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Union

import numpy as np
import torch

from .config import ModelConfig
from .model import MusiqModel

MAGIC = b"MUSIQ1\n"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: MusiqModel, meta: dict = None) -> "Checkpoint":
        tensors = {n: p.detach().cpu().numpy().copy() for n, p in model.named_parameters()}
        return cls(model.cfg, tensors, dict(meta or {}))

    def build_model(self) -> MusiqModel:
        model = MusiqModel(self.config)
        params = dict(model.named_parameters())
        if set(params) != set(self.tensors):
            missing = sorted(set(params) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(params))
            raise CheckpointError(f"parameter mismatch: missing {missing[:3]}, extra {extra[:3]}")
        with torch.no_grad():
            for name, p in params.items():
                arr = self.tensors[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise CheckpointError(f"{name}: shape {arr.shape} != {tuple(p.shape)}")
                p.copy_(torch.from_numpy(np.ascontiguousarray(arr)))
        return model

    def to_bytes(self) -> bytes:
        index, chunks, offset = [], [], 0
        for name, arr in self.tensors.items():
            dtype = str(arr.dtype)
            if dtype not in _DTYPES:
                raise CheckpointError(f"{name}: unsupported dtype {dtype}")
            raw = np.ascontiguousarray(arr).astype(_DTYPES[dtype], copy=False).tobytes()
            index.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                          "offset": offset, "length": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        header = json.dumps({"config": self.config.to_dict(), "meta": self.meta,
                             "tensors": index}, sort_keys=True, separators=(",", ":"))
        head = header.encode("utf-8")
        return MAGIC + str(len(head)).encode("ascii") + b"\n" + head + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if not data.startswith(MAGIC):
            raise CheckpointError("not a MUSIQ1 checkpoint")
        rest = data[len(MAGIC):]
        nl = rest.find(b"\n")
        if nl <= 0:
            raise CheckpointError("truncated header")
        try:
            size = int(rest[:nl])
            header = json.loads(rest[nl + 1: nl + 1 + size].decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"bad header: {exc}") from exc
        payload = rest[nl + 1 + size:]
        tensors = {}
        for entry in header["tensors"]:
            start, length = entry["offset"], entry["length"]
            if start < 0 or start + length > len(payload):
                raise CheckpointError(f"{entry['name']}: region outside file")
            dtype = entry["dtype"]
            if dtype not in _DTYPES:
                raise CheckpointError(f"{entry['name']}: unsupported dtype {dtype}")
            arr = np.frombuffer(payload[start:start + length], dtype=_DTYPES[dtype])
            tensors[entry["name"]] = arr.astype(dtype).reshape(entry["shape"])
        return cls(ModelConfig.from_dict(header["config"]), tensors, header.get("meta", {}))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def save_model(model: MusiqModel, path, meta: dict = None) -> None:
    Checkpoint.from_model(model, meta).save(path)


def load_model(path) -> MusiqModel:
    return Checkpoint.load(path).build_model()

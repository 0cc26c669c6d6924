"""Self-describing binary checkpoint container.

Layout::

    b"HIMNETCK" | u32 version | u64 header length | JSON header | tensor bytes

The header (sorted keys, compact separators) holds metadata plus a table of
named tensors with dtype, shape and byte offset into the data section.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import NormStats
from .errors import CheckpointError
from .model import HimNet, HimNetConfig

MAGIC = b"HIMNETCK"
VERSION = 1
_DTYPES = {
    torch.float32: "f4", torch.float64: "f8", torch.int64: "i8", torch.uint8: "u1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


def _tensor_bytes(t: torch.Tensor) -> bytes:
    if t.dtype not in _DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<" + _DTYPES[t.dtype]).tobytes()


@dataclass
class Checkpoint:
    model_config: dict
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    optimizer_groups: Optional[list] = None

    # -- construction ------------------------------------------------------

    @classmethod
    def from_model(cls, model: HimNet, optimizer: Optional[torch.optim.Optimizer] = None,
                   meta: Optional[dict] = None, rng_state: Optional[torch.Tensor] = None) -> "Checkpoint":
        tensors = {f"model/{k}": v.detach().clone() for k, v in model.state_dict().items()}
        groups = None
        if optimizer is not None:
            sd = optimizer.state_dict()
            for idx, state in sorted(sd["state"].items()):
                for key, value in sorted(state.items()):
                    tensors[f"optim/{idx}/{key}"] = torch.as_tensor(value).detach().clone()
            groups = sd["param_groups"]
        tensors["rng/torch"] = (rng_state if rng_state is not None else torch.get_rng_state()).clone()
        return cls(model.config.to_dict(), tensors, dict(meta or {}), groups)

    def build_model(self) -> HimNet:
        cfg = HimNetConfig.from_dict(self.model_config)
        params = {k[len("model/"):]: v for k, v in self.tensors.items() if k.startswith("model/")}
        dtype = params["head_weight"].dtype
        stats = NormStats(float(params["norm_mean"]), float(params["norm_std"]))
        model = HimNet(cfg, stats, dtype=dtype)
        missing, unexpected = model.load_state_dict(params, strict=False)
        if missing or unexpected:
            raise CheckpointError(f"checkpoint does not match model: missing {missing}, unexpected {unexpected}")
        return model

    def optimizer_state(self) -> Optional[dict]:
        if self.optimizer_groups is None:
            return None
        state: dict = {}
        for k, v in self.tensors.items():
            if k.startswith("optim/"):
                _, idx, key = k.split("/", 2)
                state.setdefault(int(idx), {})[key] = v.clone()
        return {"state": state, "param_groups": json.loads(json.dumps(self.optimizer_groups))}

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        table, chunks, offset = [], [], 0
        for name, t in self.tensors.items():
            raw = _tensor_bytes(t)
            table.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                          "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        header = {
            "format_version": VERSION,
            "model_config": self.model_config,
            "meta": self.meta,
            "optimizer_groups": self.optimizer_groups,
            "tensors": table,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<IQ", VERSION, len(blob)) + blob + b"".join(chunks)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != MAGIC:
            raise CheckpointError("not a HimNet checkpoint (bad magic)")
        version, hlen = struct.unpack("<IQ", raw[8:20])
        if version != VERSION:
            raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
        try:
            header = json.loads(raw[20:20 + hlen])
        except ValueError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
        data = raw[20 + hlen:]
        tensors = {}
        for entry in header["tensors"]:
            start, n = entry["offset"], entry["nbytes"]
            if start + n > len(data):
                raise CheckpointError(f"tensor {entry['name']} runs past end of file")
            arr = np.frombuffer(data[start:start + n], dtype="<" + entry["dtype"]).reshape(entry["shape"])
            tensors[entry["name"]] = torch.from_numpy(arr.copy())
        return cls(header["model_config"], tensors, header["meta"], header["optimizer_groups"])

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"{path}: no such checkpoint")
        return cls.from_bytes(path.read_bytes())

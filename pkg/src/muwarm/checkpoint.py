"""Checkpoint file format.

Layout::

    b"MUWARM1\\0"                      8 bytes
    header length                      uint64, little-endian
    header                             UTF-8 JSON
    tensor payloads                    float32, little-endian, directory order

The header holds the model config, scheme, run ledger, seeds, train config
and a tensor directory of ``{name, shape, offset}`` where ``offset`` counts
bytes from the start of the payload section.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, param_specs
from .parameterization import Scheme

MAGIC = b"MUWARM1\x00"


class CheckpointError(ValueError):
    pass


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    scheme: Scheme
    tensors: dict
    ledger: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def cursor(self):
        return int(self.ledger.get("cursor", 0))

    def header(self):
        directory = []
        offset = 0
        for name in param_specs(self.model_cfg):
            arr = self.tensors[name]
            directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += 4 * int(arr.size)
        return {
            "format": 1,
            "model_config": self.model_cfg.to_dict(),
            "scheme": self.scheme.to_dict(),
            "ledger": self.ledger,
            "seeds": self.seeds,
            "train_config": self.train_config,
            "meta": self.meta,
            "tensors": directory,
        }

    def to_bytes(self):
        names = list(param_specs(self.model_cfg))
        if set(names) != set(self.tensors):
            raise CheckpointError("tensor set does not match the model's role map")
        header = _dumps(self.header()).encode("utf-8")
        parts = [MAGIC, struct.pack("<Q", len(header)), header]
        for name in names:
            parts.append(np.ascontiguousarray(self.tensors[name], dtype="<f4").tobytes())
        return b"".join(parts)

    def save(self, path):
        data = self.to_bytes()
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)

    @classmethod
    def from_bytes(cls, data):
        if data[:8] != MAGIC:
            raise CheckpointError("bad magic")
        (n,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16: 16 + n].decode("utf-8"))
        base = 16 + n
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = base + entry["offset"]
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
            tensors[entry["name"]] = arr.reshape(shape).astype(np.float32)
        return cls(
            model_cfg=ModelConfig.from_dict(header["model_config"]),
            scheme=Scheme.from_dict(header["scheme"]),
            tensors=tensors,
            ledger=header["ledger"],
            seeds=header["seeds"],
            train_config=header["train_config"],
            meta=header.get("meta", {}),
        )

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

"""Model checkpoint container and its binary file format.

Layout (all integers little-endian)::

    magic        8 bytes   b"BCCRNCKP"
    version      uint32    FORMAT_VERSION
    header_len   uint32    byte length of the JSON header
    header       UTF-8 JSON, keys sorted, no whitespace
    payload      float32 LE tensors, back to back

The header echoes the model config and its hash and lists every tensor with
``name``, ``shape``, ``axes``, ``complex``, ``offset`` and ``count``.
Complex tensors are stored as their real part followed by their imaginary
part, each ``count`` values long. Tensor names pair the ``re``/``im`` parts of
a complex layer: ``enc_l.0.conv.re.weight`` and ``enc_l.0.conv.im.weight``
become the complex tensor ``enc_l.0.conv.weight``. Optimizer moments follow
under ``adam.exp_avg/<param>`` and ``adam.exp_avg_sq/<param>``.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import BCCRN, ModelConfig

MAGIC = b"BCCRNCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _pair_name(name: str) -> tuple[str, str | None]:
    parts = name.split(".")
    for i, p in enumerate(parts):
        if p in ("re", "im"):
            return ".".join(parts[:i] + parts[i + 1:]), p
    return name, None


def _part_name(logical: str, part_index: int, slot: int) -> str:
    parts = logical.split(".")
    parts.insert(part_index, ("re", "im")[slot])
    return ".".join(parts)


def _axes(logical: str, shape: tuple[int, ...]) -> list[str]:
    leaf = logical.split("/")[-1]
    last = leaf.rsplit(".", 1)[-1]
    if len(shape) == 4:
        if ".dec_" in "." + leaf or leaf.startswith("dec_"):
            return ["in_channel", "out_channel", "freq", "time"]
        return ["out_channel", "in_channel", "freq", "time"]
    if last.startswith("weight_ih"):
        return ["gate_unit", "input"]
    if last.startswith("weight_hh"):
        return ["gate_unit", "hidden"]
    if last.startswith("bias_"):
        return ["gate_unit"]
    if len(shape) == 2:
        return ["out_feature", "in_feature"]
    if len(shape) == 1:
        if ".linear." in "." + leaf + ".":
            return ["out_feature"]
        return ["channel"]
    return [f"axis{i}" for i in range(len(shape))]


def _group(tensors: "OrderedDict[str, torch.Tensor]"):
    """Group real tensors into logical entries: (name, [re, im] or [tensor], part_index)."""
    groups: "OrderedDict[str, dict]" = OrderedDict()
    for name, t in tensors.items():
        logical, part = _pair_name(name)
        if part is None:
            groups[name] = {"parts": [t], "index": None}
            continue
        idx = name.split(".").index(part)
        g = groups.setdefault(logical, {"parts": [None, None], "index": idx})
        g["parts"][0 if part == "re" else 1] = t
    for logical, g in groups.items():
        if any(p is None for p in g["parts"]):
            raise CheckpointError(f"complex tensor {logical} is missing a part")
    return groups


def _model_tensors(model: BCCRN) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict(
        (k, v) for k, v in model.state_dict().items() if not k.endswith("num_batches_tracked")
    )


@dataclass
class ModelCheckpoint:
    """Model parameters, config echo, optional optimizer moments and free-form metadata."""

    model: BCCRN
    optimizer: dict | None = None  # {"step": int, "exp_avg": {name: t}, "exp_avg_sq": {name: t}}
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    @classmethod
    def create(cls, config: ModelConfig = ModelConfig(), **meta) -> "ModelCheckpoint":
        return cls(BCCRN(config), None, dict(meta))

    # -- serialisation -----------------------------------------------------
    def to_bytes(self) -> bytes:
        tensors = _model_tensors(self.model)
        if self.optimizer is not None:
            for key in ("exp_avg", "exp_avg_sq"):
                for name, t in self.optimizer[key].items():
                    tensors[f"adam.{key}/{name}"] = t
        directory, chunks, offset = [], [], 0
        for logical, g in _group(tensors).items():
            parts = [p.detach().cpu().to(torch.float32).contiguous() for p in g["parts"]]
            shape = list(parts[0].shape)
            count = int(np.prod(shape)) if shape else 1
            directory.append({
                "name": logical,
                "shape": shape,
                "axes": _axes(logical, tuple(shape)),
                "complex": len(parts) == 2,
                "part_index": g["index"],
                "offset": offset,
                "count": count,
            })
            for p in parts:
                chunks.append(p.numpy().astype("<f4").tobytes())
                offset += count * 4
        header = {
            "format": "bccrn-checkpoint",
            "version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "parameter_count": sum(p.numel() for p in self.model.parameters()),
            "parameter_count_convention": "real scalars; complex weights count both parts",
            "optimizer": None if self.optimizer is None else {"step": int(self.optimizer["step"])},
            "meta": self.meta,
            "tensors": directory,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<II", FORMAT_VERSION, len(blob)) + blob + b"".join(chunks)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        if data[:8] != MAGIC:
            raise CheckpointError("not a BCCRN checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", data[8:16])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
        payload = data[16 + hlen:]
        config = ModelConfig.from_dict(header["config"])
        if config.hash() != header["config_hash"]:
            raise CheckpointError("config hash mismatch")
        tensors: dict[str, torch.Tensor] = {}
        for entry in header["tensors"]:
            n, off = entry["count"], entry["offset"]
            n_parts = 2 if entry["complex"] else 1
            end = off + 4 * n * n_parts
            if end > len(payload):
                raise CheckpointError(f"payload truncated at tensor {entry['name']}")
            flat = np.frombuffer(payload[off:end], dtype="<f4").astype(np.float32)
            for slot in range(n_parts):
                values = torch.from_numpy(flat[slot * n:(slot + 1) * n].copy()).reshape(entry["shape"])
                name = entry["name"]
                if entry["complex"]:
                    name = _part_name(name, entry["part_index"], slot)
                tensors[name] = values
        model = BCCRN(config)
        state = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
        missing, unexpected = model.load_state_dict(state, strict=False)
        missing = [m for m in missing if not m.endswith("num_batches_tracked")]
        if missing or unexpected:
            raise CheckpointError(f"checkpoint/model mismatch: missing={missing} unexpected={unexpected}")
        optimizer = None
        if header["optimizer"] is not None:
            optimizer = {"step": header["optimizer"]["step"], "exp_avg": {}, "exp_avg_sq": {}}
            for k, v in tensors.items():
                if k.startswith("adam."):
                    slot, pname = k[len("adam."):].split("/", 1)
                    optimizer[slot][pname] = v
        return cls(model, optimizer, header["meta"])

    @classmethod
    def load(cls, path: str | Path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def describe(self) -> dict:
        data = self.to_bytes()
        (hlen,) = struct.unpack("<I", data[12:16])
        return json.loads(data[16:16 + hlen].decode("utf-8"))

"""Versioned binary checkpoint container.

Layout (little-endian)::

    magic     8s  b"DACLCKPT"
    version   u32
    meta_len  u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    step      u64
    n_tensors u32, then per tensor:
        name_len u16, name (UTF-8)
        dtype    u8   0 float32, 1 float64, 2 int64
        ndim     u8, then ndim x u32 extents
        payload  row-major little-endian values

The meta block carries the config snapshot, the network table
(``prefix -> {arch_id, seed}``) and optimizer step counters.
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"DACLCKPT"
VERSION = 1
_DTYPES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8"), torch.int64: (2, "<i8")}
_CODES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPES.items()}


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)
    step: int = 0
    tensors: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)

    def add_network(self, prefix: str, net) -> None:
        self.meta.setdefault("networks", {})[prefix] = {"arch_id": net.arch_id, "seed": net.seed}
        for name, p in net.named_parameters():
            self.tensors[f"{prefix}.{name}"] = p.detach().clone()

    def network_names(self) -> list:
        return list(self.meta.get("networks", {}))

    def load_network(self, prefix: str, net) -> None:
        """Copy stored values into ``net``; names and shapes must match exactly."""
        info = self.meta.get("networks", {}).get(prefix)
        if info is None:
            raise CheckpointError(f"checkpoint has no network {prefix!r}")
        if info["arch_id"] != net.arch_id:
            raise CheckpointError(f"{prefix}: stored arch {info['arch_id']!r}, model is {net.arch_id!r}")
        stored = {k[len(prefix) + 1 :]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}
        own = dict(net.named_parameters())
        if list(stored) != list(own):
            raise CheckpointError(f"{prefix}: parameter names differ from the model")
        with torch.no_grad():
            for name, p in own.items():
                if stored[name].shape != p.shape:
                    raise CheckpointError(
                        f"{prefix}.{name}: stored shape {tuple(stored[name].shape)}, model {tuple(p.shape)}"
                    )
                p.copy_(stored[name])

    def add_optimizer(self, key: str, opt) -> None:
        self.meta.setdefault("optimizers", {})[key] = {"step": opt.state["step"]}
        for name, t in opt.state_tensors().items():
            self.tensors[f"opt.{key}.{name}"] = t.detach().clone()

    def load_optimizer(self, key: str, opt) -> None:
        info = self.meta.get("optimizers", {}).get(key)
        if info is None:
            raise CheckpointError(f"checkpoint has no optimizer state {key!r}")
        pre = f"opt.{key}."
        stored = {k[len(pre) :]: v for k, v in self.tensors.items() if k.startswith(pre)}
        try:
            opt.load_state_tensors(info["step"], stored)
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<QI", ckpt.step, len(ckpt.tensors)))
    for name, t in ckpt.tensors.items():
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        code, np_dt = _DTYPES[t.dtype]
        raw = name.encode()
        buf.write(struct.pack("<HBB", len(raw), code, t.dim()))
        buf.write(raw)
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.detach().contiguous().numpy().astype(np_dt).tobytes())
    return buf.getvalue()


def decode(data: bytes, path="<memory>") -> Checkpoint:
    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[off : off + n]
        off += n
        return chunk

    off = 0
    if take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    meta = json.loads(take(meta_len).decode())
    step, n = struct.unpack("<QI", take(12))
    tensors = OrderedDict()
    for _ in range(n):
        name_len, code, ndim = struct.unpack("<HBB", take(4))
        name = take(name_len).decode()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if code not in _CODES:
            raise CheckpointError(f"{path}: {name} has unknown dtype code {code}")
        dt, np_dt = _CODES[code]
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(count * np.dtype(np_dt).itemsize), np_dt).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np_dt[1:], copy=True))
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint body")
    return Checkpoint(meta=meta, step=step, tensors=tensors)


def save(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: checkpoint not found")
    return decode(path.read_bytes(), path)

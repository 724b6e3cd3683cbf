"""Flat binary checkpoint format.

Layout: an ASCII manifest of ``key=value`` lines closed by an empty line, then
one record per tensor::

    uint32 name_len | name (utf-8) | uint32 rank | uint32 dims[rank] | float32 data

All integers and floats are little-endian; data is row-major. The manifest
carries the SHA-256 of everything after it, so truncation or bit rot fails on load.
"""

from __future__ import annotations

import hashlib
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from wxrestore.config import NetworkConfig, network_config_from_items, network_config_items
from wxrestore.errors import CheckpointError

MAGIC = "WXCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    manifest: dict[str, str]
    tensors: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)

    @property
    def step(self) -> int:
        return int(self.manifest["step"])

    @property
    def seed(self) -> int:
        return int(self.manifest["seed"])

    @property
    def config_hash(self) -> str:
        return self.manifest["config_hash"]

    def network_config(self) -> NetworkConfig:
        items = {k[len("model."):]: v for k, v in self.manifest.items() if k.startswith("model.")}
        return network_config_from_items(items)

    def group(self, prefix: str) -> "OrderedDict[str, torch.Tensor]":
        p = prefix + "/"
        return OrderedDict((k[len(p):], v) for k, v in self.tensors.items() if k.startswith(p))


def _encode_tensors(tensors) -> bytes:
    parts = []
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        # not np.ascontiguousarray: it promotes 0-d tensors to shape (1,)
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def save(path: str | Path, tensors, config: NetworkConfig, step: int, seed: int,
         extra: dict[str, str] | None = None) -> None:
    payload = _encode_tensors(tensors)
    manifest = {
        "format_version": str(FORMAT_VERSION),
        "config_hash": config.config_hash(),
        "step": str(step),
        "seed": str(seed),
    }
    manifest.update({f"model.{k}": v for k, v in network_config_items(config).items()})
    manifest.update(extra or {})
    manifest["entries"] = str(len(tensors))
    manifest["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    header = MAGIC + "\n" + "".join(f"{k}={v}\n" for k, v in manifest.items()) + "\n"

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)
    os.replace(tmp, path)


def load(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    end = data.find(b"\n\n")
    if not data.startswith(MAGIC.encode() + b"\n") or end < 0:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or manifest)")
    manifest: dict[str, str] = {}
    try:
        for line in data[len(MAGIC) + 1:end].decode("ascii").splitlines():
            key, _, value = line.partition("=")
            manifest[key] = value
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: manifest hash mismatch (unreadable manifest)") from None
    if manifest.get("format_version") != str(FORMAT_VERSION):
        raise CheckpointError(f"{path}: unsupported format_version "
                              f"{manifest.get('format_version')!r}")
    payload = data[end + 2:]
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise CheckpointError(f"{path}: manifest hash mismatch")

    tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
    pos = 0
    try:
        for _ in range(int(manifest["entries"])):
            (n,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            name = payload[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", payload, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt payload ({exc})") from None
    if pos != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after {len(tensors)} entries")
    ckpt = Checkpoint(manifest, tensors)
    if ckpt.network_config().config_hash() != ckpt.config_hash:
        raise CheckpointError(f"{path}: manifest hash mismatch (model config)")
    return ckpt

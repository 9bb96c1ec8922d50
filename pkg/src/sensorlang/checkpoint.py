"""Binary checkpoint container for a trained model bundle.

Layout (all integers little-endian)::

    b"SLCK"                     magic
    u32  version                 FORMAT_VERSION
    u32  record count
    record*                      one per tensor
    u32 len | bytes              config block (UTF-8 JSON)
    u32 len | bytes              vocabulary block (one token per line)
    u32 len | bytes              registry block (UTF-8 JSON)
    u32  crc32                   over every preceding byte

    record := u16 name length | name (UTF-8)
              u8 dtype (0 = float32) | u8 trainable | u8 ndim | u32[ndim] shape
              f32[prod(shape)] data

Tensor names are ``<member>/<parameter>`` for model tensors and
``momentum:<member>/<parameter>`` for optimizer buffers.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .alignment import LossConfig
from .encoders import ModelConfig
from .textpipe import ClassRegistry, Vocabulary
from .trainer import ModelBundle, TrainConfig, build_bundle

MAGIC = b"SLCK"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4")}
MOMENTUM = "momentum:"


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class CheckpointHeaderError(CheckpointError):
    """The file does not start with a valid checkpoint header."""


class CheckpointVersionError(CheckpointError):
    """The file was written by an incompatible format version."""


class CheckpointPayloadError(CheckpointError):
    """The payload is truncated, corrupt or does not match the model it describes."""


def _block(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def _record(name: str, t: torch.Tensor, trainable: bool) -> bytes:
    arr = t.detach().cpu().contiguous().numpy().astype("<f4", copy=False)
    key = name.encode()
    head = struct.pack("<H", len(key)) + key + struct.pack("<BBB", 0, int(trainable), arr.ndim)
    return head + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()


def to_bytes(bundle: ModelBundle) -> bytes:
    records = []
    for key, model in bundle.members.items():
        trainable = {n for n, p in model.named_parameters() if p.requires_grad}
        for name, t in model.state_dict().items():
            records.append(_record(f"{key}/{name}", t, name in trainable))
        for name, buf in sorted(bundle.buffers[key].items()):
            records.append(_record(f"{MOMENTUM}{key}/{name}", buf, False))
    config = {
        "train": bundle.train_cfg.to_dict(),
        "loss": bundle.loss_cfg.to_dict(),
        "model": bundle.model_cfg.to_dict(),
        "epoch": bundle.epoch,
        "members": {k: list(m.modalities) for k, m in bundle.members.items()},
    }
    body = bytearray(MAGIC + struct.pack("<II", FORMAT_VERSION, len(records)))
    for r in records:
        body += r
    body += _block(json.dumps(config, sort_keys=True).encode())
    body += _block(bundle.vocab.to_text().encode())
    body += _block(bundle.registry.to_json().encode())
    return bytes(body) + struct.pack("<I", zlib.crc32(body))


def save(bundle: ModelBundle, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(bundle))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointPayloadError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> ModelBundle:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointHeaderError("not a checkpoint file (bad magic bytes)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    r = _Reader(data)
    r.pos = 8
    (count,) = r.unpack("<I")
    tensors: dict[str, tuple[np.ndarray, bool]] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        code, trainable, ndim = r.unpack("<BBB")
        if code not in _DTYPES:
            raise CheckpointPayloadError(f"tensor {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size), dtype=_DTYPES[code]).reshape(shape)
        tensors[name] = (arr, bool(trainable))
    blocks = []
    for _ in range(3):
        (n,) = r.unpack("<I")
        blocks.append(r.take(n))
    (crc,) = r.unpack("<I")
    if zlib.crc32(data[:r.pos - 4]) != crc:
        raise CheckpointPayloadError("checkpoint checksum mismatch (file corrupt)")
    if r.pos != len(data):
        raise CheckpointPayloadError(f"{len(data) - r.pos} trailing bytes after checkpoint")

    try:
        config = json.loads(blocks[0])
        vocab = Vocabulary.from_text(blocks[1].decode())
        registry = ClassRegistry.from_json(blocks[2].decode())
        train_cfg = TrainConfig(**config["train"])
        loss_cfg = LossConfig(**config["loss"])
        model_cfg = ModelConfig(**config["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointPayloadError(f"checkpoint configuration unreadable: {exc}") from exc
    bundle = build_bundle(registry, vocab, train_cfg, loss_cfg, model_cfg)
    if {k: list(m.modalities) for k, m in bundle.members.items()} != config["members"]:
        raise CheckpointPayloadError("checkpoint members do not match its training configuration")
    bundle.epoch = int(config["epoch"])

    for key, model in bundle.members.items():
        trainable = {n for n, p in model.named_parameters() if p.requires_grad}
        state = {}
        for name, t in model.state_dict().items():
            full = f"{key}/{name}"
            if full not in tensors:
                raise CheckpointPayloadError(f"checkpoint lacks tensor {full!r}")
            arr, flag = tensors.pop(full)
            if tuple(arr.shape) != tuple(t.shape) or flag != (name in trainable):
                raise CheckpointPayloadError(f"tensor {full!r} does not match the model layout")
            state[name] = torch.from_numpy(arr.copy())
        model.load_state_dict(state)
        prefix = f"{MOMENTUM}{key}/"
        for full in [k for k in tensors if k.startswith(prefix)]:
            arr, _ = tensors.pop(full)
            bundle.buffers[key][full[len(prefix):]] = torch.from_numpy(arr.copy())
    if tensors:
        raise CheckpointPayloadError(f"checkpoint holds unknown tensors: {sorted(tensors)[:3]}")
    return bundle


def load(path: str | Path) -> ModelBundle:
    return from_bytes(Path(path).read_bytes())

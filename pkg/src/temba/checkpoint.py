"""Model checkpoint container ("TMBW").

Layout: magic "TMBW", version u32, length-prefixed UTF-8 JSON model
config, then one blob per parameter in sorted name order: u32 name
length, name bytes, u32 rank, u32 dims, little-endian float32 values.
All integers little-endian. Parameters are stored as float32 regardless
of runtime dtype, so a float32 model round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .model import ModelConfig, TembaModel

CKPT_MAGIC = b"TMBW"
CKPT_VERSION = 1


def save_checkpoint(path, model: TembaModel) -> None:
    params = model.named_parameters()
    cfg_bytes = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(
                f"{self.path}: truncated reading {what}: need {n} bytes at "
                f"offset {self.pos}, file has {len(self.raw) - self.pos} left")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.raw)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Returns (config, {name: float32 array}); validates the container."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    cfg_len = r.u32("config length")
    try:
        cfg_doc = json.loads(r.take(cfg_len, "config JSON").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad config JSON ({e})") from None
    config = ModelConfig.from_dict(cfg_doc)
    params: dict[str, np.ndarray] = {}
    while not r.exhausted:
        name = r.take(r.u32("name length"), "parameter name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        if rank > 3:
            raise FormatError(f"{path}: parameter {name} has rank {rank} > 3")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"shape of {name}"))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        blob = r.take(4 * count, f"values of {name}")
        params[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
    return config, params


def restore_model(path, seed: int = 0) -> TembaModel:
    """Rebuild a model from a checkpoint: config first, then weights."""
    config, params = load_checkpoint(path)
    model = TembaModel(config, seed=seed)
    own = model.named_parameters()
    missing = sorted(set(own) - set(params))
    extra = sorted(set(params) - set(own))
    if missing or extra:
        raise ValidationError(
            f"{path}: parameter names do not match config "
            f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for name, tensor in own.items():
        stored = params[name]
        if stored.shape != tensor.data.shape:
            raise ValidationError(
                f"{path}: {name} has shape {stored.shape}, model expects "
                f"{tensor.data.shape}")
        tensor.data = stored.astype(tensor.data.dtype)
    return model

"""Named-tensor checkpoint files.

Layout (little-endian)::

    b"RCMP"  u32 version
    u16 len  kind tag (UTF-8)
    u32 len  config echo (UTF-8 JSON)
    u32 count, then per tensor sorted by name:
        u16 len  name (UTF-8)
        u8 dtype code (0 = float32)
        u8 rank, rank x u32 dims
        float32 payload
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RCMP"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


class CorruptFileError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ModelKindError(CheckpointError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def check_crc(data: bytes) -> bytes:
    """Return the body of a CRC-trailed buffer or raise naming the offset."""
    if len(data) < 4:
        raise CorruptFileError("file too short for a CRC trailer (offset 0)")
    body = data[:-4]
    (stored,) = struct.unpack("<I", data[-4:])
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if stored != actual:
        raise CorruptFileError(
            f"CRC mismatch at offset {len(body)}: stored {stored:08x}, computed {actual:08x}")
    return body


def fingerprint(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<I", VERSION)
        kind = self.kind.encode("utf-8")
        out += struct.pack("<H", len(kind)) + kind
        echo = json.dumps(self.config, sort_keys=True).encode("utf-8")
        out += struct.pack("<I", len(echo)) + echo
        out += struct.pack("<I", len(self.tensors))
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            raw = name.encode("utf-8")
            out += struct.pack("<H", len(raw)) + raw
            out += struct.pack("<BB", DTYPE_F32, arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += arr.tobytes()
        return with_crc(bytes(out))

    @classmethod
    def from_bytes(cls, data: bytes, expect_kind: str | None = None) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        body = check_crc(data)
        (version,) = struct.unpack_from("<I", body, 4)
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
        pos = 8
        (klen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        kind = body[pos:pos + klen].decode("utf-8")
        pos += klen
        if expect_kind is not None and kind != expect_kind:
            raise ModelKindError(f"checkpoint holds a {kind!r} model, expected {expect_kind!r}")
        (elen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        config = json.loads(body[pos:pos + elen].decode("utf-8"))
        pos += elen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            if code != DTYPE_F32:
                raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if name in tensors:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
            pos += 4 * n
        if pos != len(body):
            raise CorruptFileError(f"trailing bytes at offset {pos}")
        return cls(kind, config, tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(path, ckpt.to_bytes())


def load_checkpoint(path, expect_kind: str | None = None) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes(), expect_kind)


# ---------------------------------------------------------------------------
# model <-> checkpoint


def vqvae_checkpoint(model, optimizer=None, extra: dict | None = None) -> Checkpoint:
    tensors = {f"param/{k}": v for k, v in model.params.items()}
    tensors.update({f"buffer/{k}": v for k, v in model.buffers().items()})
    if optimizer is not None:
        tensors.update({f"optim/{k}": v for k, v in optimizer.state_tensors().items()})
    config = {"model": model.config.to_dict(), **(extra or {})}
    return Checkpoint("vqvae", config, tensors)


def vqvae_from_checkpoint(ckpt: Checkpoint):
    from .vqvae import VqVae, VqVaeConfig

    if ckpt.kind != "vqvae":
        raise ModelKindError(f"checkpoint holds a {ckpt.kind!r} model, expected 'vqvae'")
    cfg = VqVaeConfig(**ckpt.config["model"])
    model = VqVae.init(cfg, seed=0)
    _load_params(model.params, ckpt.tensors)
    model.load_buffers({k[len("buffer/"):]: v for k, v in ckpt.tensors.items() if k.startswith("buffer/")})
    model.set_mode("eval")
    return model


def prior_checkpoint(model, optimizer=None, extra: dict | None = None) -> Checkpoint:
    tensors = {f"param/{k}": v for k, v in model.params.items()}
    if optimizer is not None:
        tensors.update({f"optim/{k}": v for k, v in optimizer.state_tensors().items()})
    config = {"model": model.config.to_dict(), **(extra or {})}
    return Checkpoint("prior", config, tensors)


def prior_from_checkpoint(ckpt: Checkpoint):
    from .prior import PriorConfig, PriorModel

    if ckpt.kind != "prior":
        raise ModelKindError(f"checkpoint holds a {ckpt.kind!r} model, expected 'prior'")
    model = PriorModel.init(PriorConfig(**ckpt.config["model"]), seed=0)
    _load_params(model.params, ckpt.tensors)
    return model


def optimizer_tensors(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    return {k[len("optim/"):]: v for k, v in ckpt.tensors.items() if k.startswith("optim/")}


def _load_params(params: dict[str, np.ndarray], tensors: dict[str, np.ndarray]) -> None:
    for name in params:
        key = f"param/{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        if tensors[key].shape != params[name].shape:
            raise CheckpointError(f"{key}: shape {tensors[key].shape} vs model {params[name].shape}")
        params[name] = tensors[key].astype(params[name].dtype)

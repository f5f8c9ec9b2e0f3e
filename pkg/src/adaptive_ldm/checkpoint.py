"""Checkpoint container: a JSON header plus a table of named float32 tensors.

Layout (little-endian)::

    b"LDMC"  u16 format version  u32 header length  header JSON (utf-8)
    u32 tensor count, then per tensor:
        u16 name length, name (utf-8), u8 rank, u32 * rank extents, float32 payload
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LDMC"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Unreadable checkpoint or one that does not match the requested model."""


@dataclass
class Checkpoint:
    stage: str
    spec: dict
    tensors: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    latent_scale: float | None = None
    extra: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "stage": self.stage,
            "spec": self.spec,
            "step": self.step,
            "seed": self.seed,
            "latent_scale": self.latent_scale,
            "extra": self.extra,
        }


def tensor_table_hash(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(header)), header, struct.pack("<I", len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        arr = np.asarray(value, dtype="<f4")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (magic {buf[:4]!r})")
    try:
        version, hlen = struct.unpack_from("<HI", buf, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
        pos = 10
        header = json.loads(buf[pos : pos + hlen].decode())
        pos += hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            if pos + 4 * n > len(buf):
                raise CheckpointError(f"{source}: tensor {name!r} truncated")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt checkpoint ({exc})") from None
    return Checkpoint(
        stage=header["stage"],
        spec=header["spec"],
        tensors=tensors,
        step=header["step"],
        seed=header["seed"],
        latent_scale=header["latent_scale"],
        extra=header.get("extra", {}),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path, stage: str | None = None, spec: dict | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        label = f"{stage} " if stage else ""
        raise CheckpointError(f"missing {label}checkpoint: {path}")
    ckpt = decode_checkpoint(path.read_bytes(), str(path))
    if stage is not None and ckpt.stage != stage:
        raise CheckpointError(f"{path}: expected a {stage} checkpoint, found stage {ckpt.stage!r}")
    if spec is not None:
        want = json.loads(json.dumps(spec, sort_keys=True))
        if ckpt.spec != want:
            diff = sorted(k for k in set(want) | set(ckpt.spec) if want.get(k) != ckpt.spec.get(k))
            raise CheckpointError(f"{path}: model spec mismatch in {', '.join(diff)}")
    return ckpt

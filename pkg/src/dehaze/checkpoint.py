"""Binary checkpoint container.

Layout (little endian)::

    magic    8 bytes  b"DHZCKPT\\0"
    version  u32
    meta     u32 length + UTF-8 JSON (sorted keys)
    count    u32
    records  count x (u16 name length, name, u8 ndim, ndim x u32 dims, float32 data)
    crc32    u32 over everything above
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"DHZCKPT\x00"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointMissingError(CheckpointError):
    def __init__(self, name: str):
        super().__init__(f"checkpoint has no tensor {name!r} (architecture mismatch?)")
        self.name = name


class CheckpointShapeError(CheckpointError):
    def __init__(self, name: str, expected, found):
        super().__init__(f"parameter {name!r}: checkpoint has shape {tuple(found)}, model expects {tuple(expected)}")
        self.name = name


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.metadata, sort_keys=True, separators=(",", ":")).encode()
        parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            raw = name.encode()
            arr = np.asarray(arr)
            parts.append(struct.pack("<HB", len(raw), arr.ndim))
            parts.append(raw)
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < len(MAGIC) + 16 or data[: len(MAGIC)] != MAGIC:
            raise CorruptCheckpointError("not a checkpoint file (bad magic)")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        (version,) = struct.unpack_from("<I", data, len(MAGIC))
        if version != VERSION:
            raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {VERSION}")
        if zlib.crc32(body) != crc:
            raise CorruptCheckpointError("checksum mismatch (truncated or corrupted file)")
        try:
            off = len(MAGIC) + 4
            (meta_len,) = struct.unpack_from("<I", body, off)
            off += 4
            metadata = json.loads(body[off : off + meta_len].decode())
            off += meta_len
            (count,) = struct.unpack_from("<I", body, off)
            off += 4
            tensors = {}
            for _ in range(count):
                name_len, ndim = struct.unpack_from("<HB", body, off)
                off += 3
                name = body[off : off + name_len].decode()
                off += name_len
                shape = struct.unpack_from(f"<{ndim}I", body, off)
                off += 4 * ndim
                size = int(np.prod(shape)) if ndim else 1
                arr = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(shape)
                off += 4 * size
                tensors[name] = arr.astype(np.float32)
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise CorruptCheckpointError(f"malformed checkpoint: {exc}") from exc
        if off != len(body):
            raise CorruptCheckpointError("trailing bytes after last record")
        return cls(tensors, metadata)


def network_state(nets: Iterable) -> dict[str, np.ndarray]:
    out = {}
    for net in nets:
        for key, arr in {**net.params(), **net.buffers()}.items():
            out[f"{net.name}/{key}"] = np.array(arr, dtype=np.float32)
    return out


def load_into(nets: Iterable, ckpt: Checkpoint) -> None:
    """Copy checkpoint values into the networks' arrays (shapes must match)."""
    for net in nets:
        for key, arr in {**net.params(), **net.buffers()}.items():
            name = f"{net.name}/{key}"
            if name not in ckpt.tensors:
                raise CheckpointMissingError(name)
            src = ckpt.tensors[name]
            if src.shape != arr.shape:
                raise CheckpointShapeError(name, arr.shape, src.shape)
            arr[...] = src


def save_checkpoint(nets: Iterable, metadata: Mapping, path, extra: Mapping[str, np.ndarray] | None = None) -> Checkpoint:
    tensors = network_state(nets)
    if extra:
        tensors.update(extra)
    ckpt = Checkpoint(tensors, dict(metadata))
    Path(path).write_bytes(ckpt.to_bytes())
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return Checkpoint.from_bytes(data)

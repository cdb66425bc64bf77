"""Versioned binary checkpoint container.

Layout (little-endian): magic ``MSEQ``, version u32, config length u32 and the
UTF-8 config text, tensor count u32, then per tensor the name length u16, UTF-8
name, dtype code u8, ndim u8, one u32 per dimension and the raw data. A CRC32 of
every preceding byte closes the file.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"MSEQ"
VERSION = 1

# 0 is the float32 code; the others carry optimizer counters and PRNG state.
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<u8")}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


@dataclass
class ModelCheckpoint:
    config: dict[str, str]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.config.get("kind", "")

    @property
    def step(self) -> int:
        return int(self.config.get("step", 0))

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix removed."""
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}


def config_to_text(config: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.items())


def config_from_text(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise FormatError(f"config line without '=': {line!r}")
        out[key.strip()] = val.strip()
    return out


def encode_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    text = config_to_text(ckpt.config).encode("utf-8")
    parts += [struct.pack("<I", len(text)), text, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODE_OF:
            raise ValidationError(f"tensor '{name}': unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<BB", _CODE_OF[dt], arr.ndim)]
        parts += [struct.pack("<I", d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw) - 4:
            raise FormatError(f"{self.path}: truncated while reading {what}", self.pos)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(raw: bytes, path="<bytes>") -> ModelCheckpoint:
    if len(raw) < 16:
        raise FormatError(f"{path}: file too short for a checkpoint", len(raw))
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}", 0)
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise FormatError(f"{path}: CRC mismatch", len(raw) - 4)
    r = _Reader(raw, path)
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", 4)
    (n_text,) = r.unpack("<I", "config length")
    config = config_from_text(r.take(n_text, "config").decode("utf-8"))
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (n_name,) = r.unpack("<H", "tensor name length")
        name = r.take(n_name, "tensor name").decode("utf-8")
        code, ndim = r.unpack("<BB", f"header of '{name}'")
        if code not in DTYPE_CODES:
            raise FormatError(f"{path}: tensor '{name}' has unknown dtype code {code}", r.pos - 2)
        shape = r.unpack(f"<{ndim}I", f"shape of '{name}'") if ndim else ()
        dt = DTYPE_CODES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        data = r.take(n_bytes, f"data of '{name}'")
        tensors[name] = np.frombuffer(data, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(raw) - 4:
        raise FormatError(f"{path}: {len(raw) - 4 - r.pos} unexpected bytes before CRC", r.pos)
    return ModelCheckpoint(config, tensors)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    """Write atomically so an interrupted save never replaces a good file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelCheckpoint:
    return decode_checkpoint(Path(path).read_bytes(), path)

"""Binary checkpoint container.

Layout::

    b"VIVIMCK1"
    uint32 section count
    per section: uint16 name length, UTF-8 name, uint64 offset, uint64 length
    section payloads

All integers and parameter values are little-endian; parameter payloads are
flat float64 arrays. Parameters live under ``model/`` and ``affine/``; the
training configuration is a UTF-8 text payload under ``meta/config``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VIVIMCK1"
CONFIG_SECTION = "meta/config"
MODEL_PREFIX = "model/"
AFFINE_PREFIX = "affine/"


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str = ""
    model: dict[str, np.ndarray] = field(default_factory=dict)
    affine: dict[str, np.ndarray] = field(default_factory=dict)


def _sections(ck: Checkpoint) -> list[tuple[str, bytes]]:
    out = [(CONFIG_SECTION, ck.config_text.encode("utf-8"))]
    for prefix, state in ((MODEL_PREFIX, ck.model), (AFFINE_PREFIX, ck.affine)):
        for name in sorted(state):
            blob = np.ascontiguousarray(state[name], dtype="<f8").tobytes()
            out.append((prefix + name, blob))
    return out


def encode(ck: Checkpoint) -> bytes:
    sections = _sections(ck)
    names = [n.encode("utf-8") for n, _ in sections]
    header = len(MAGIC) + 4 + sum(2 + len(n) + 16 for n in names)
    table, offset = [], header
    for raw, (_, blob) in zip(names, sections):
        table.append(struct.pack("<H", len(raw)) + raw + struct.pack("<QQ", offset, len(blob)))
        offset += len(blob)
    return b"".join([MAGIC, struct.pack("<I", len(sections)), *table, *(b for _, b in sections)])


def decode(raw: bytes) -> Checkpoint:
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointFormatError("truncated checkpoint (section table)")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    ck = Checkpoint()
    seen = set()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        offset, length = struct.unpack("<QQ", take(16))
        if offset + length > len(raw):
            raise CheckpointFormatError(f"truncated checkpoint (section {name!r})")
        if name in seen:
            raise CheckpointFormatError(f"duplicate section {name!r}")
        seen.add(name)
        blob = raw[offset:offset + length]
        if name == CONFIG_SECTION:
            ck.config_text = blob.decode("utf-8")
            continue
        if length % 8:
            raise CheckpointFormatError(f"section {name!r} is not a float64 array")
        values = np.frombuffer(blob, dtype="<f8").astype(np.float64)
        if name.startswith(MODEL_PREFIX):
            ck.model[name[len(MODEL_PREFIX):]] = values
        elif name.startswith(AFFINE_PREFIX):
            ck.affine[name[len(AFFINE_PREFIX):]] = values
        else:
            raise CheckpointFormatError(f"unknown section {name!r}")
    return ck


def save_checkpoint(path, model=None, affine=None, config_text: str = "") -> Path:
    ck = Checkpoint(config_text,
                    model.state_dict() if model is not None else {},
                    affine.state_dict() if affine is not None else {})
    path = Path(path)
    path.write_bytes(encode(ck))
    return path


def read_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())

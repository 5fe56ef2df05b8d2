"""Named parameter storage and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic        4 bytes   b"BPCK"
    version      uint32    currently 1
    count        uint32    number of entries
    entry * count:
        name_len uint16
        name     name_len bytes, UTF-8
        role     uint8     0 = trainable parameter, 1 = buffer (e.g. BN running stats)
        ndim     uint8
        dims     ndim * uint32
        data     prod(dims) * float32, little-endian, row-major

Entries appear in the network's deterministic parameter order, so identical
states produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import DTYPE, Tensor

MAGIC = b"BPCK"
FORMAT_VERSION = 1
PARAM, BUFFER = 0, 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Insertion-ordered mapping of unique names to trainable tensors."""

    def __init__(self, entries=()):
        self._entries: dict[str, Tensor] = {}
        for name, t in entries:
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def num_scalars(self) -> int:
        return sum(t.size for t in self._entries.values())

    def prefixed(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(prefix + name, t) for name, t in self._entries.items()]

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None


def save_checkpoint(path, entries) -> None:
    """Write ``(name, role, array)`` triples in the documented layout."""
    Path(path).write_bytes(encode_checkpoint(entries))


def encode_checkpoint(entries) -> bytes:
    entries = list(entries)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, role, arr in entries:
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", role, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def load_checkpoint(path) -> list[tuple[str, int, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    pos = 4
    try:
        version, count = struct.unpack_from("<II", blob, pos)
        pos += 8
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        out = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            role, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(blob):
                raise CheckpointError(f"{path}: truncated data for entry {name!r}")
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).astype(DTYPE).reshape(dims)
            pos += 4 * n
            out.append((name, role, arr))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return out


def state_hash(entries) -> str:
    return hashlib.sha256(encode_checkpoint(entries)).hexdigest()

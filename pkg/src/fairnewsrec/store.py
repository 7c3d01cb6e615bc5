"""Named parameter arrays and the binary checkpoint format.

Checkpoint layout (all integers unsigned 64-bit little-endian)::

    b"FAIRREC1"
    count
    repeated count times:
        name length, UTF-8 name bytes
        rank, dims[rank]
        values as float64 little-endian, row-major
"""

from __future__ import annotations

import struct
from collections.abc import MutableMapping
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Tensor

MAGIC = b"FAIRREC1"


class CheckpointError(ValueError):
    pass


class ParameterStore(MutableMapping):
    """Ordered mapping of parameter name to float64 array."""

    def __init__(self, items=None):
        self._data: dict[str, np.ndarray] = {}
        if items:
            for k, v in dict(items).items():
                self[k] = v

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value) -> None:
        self._data[name] = np.asarray(value, dtype=np.float64)

    def __delitem__(self, name: str) -> None:
        del self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def copy(self) -> ParameterStore:
        return ParameterStore({k: v.copy() for k, v in self._data.items()})

    def group(self, prefix: str) -> list[str]:
        return [k for k in self._data if k.startswith(prefix)]

    def leaves(self, trainable=lambda name: True) -> dict[str, Tensor]:
        """Fresh graph leaves over the stored arrays (no copy)."""
        return {k: Tensor(v, requires_grad=bool(trainable(k))) for k, v in self._data.items()}

    def equals(self, other: ParameterStore) -> bool:
        if list(self) != list(other):
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes() for k in self
        )

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> ParameterStore:
        return cls.from_bytes(Path(path).read_bytes())

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<Q", len(self._data))]
        for name, arr in self._data.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<Q", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<Q", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> ParameterStore:
        if buf[:8] != MAGIC:
            raise CheckpointError("not a checkpoint: bad magic")
        pos = 8

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(buf):
                raise CheckpointError("truncated checkpoint")
            chunk = buf[pos : pos + n]
            pos += n
            return chunk

        (count,) = struct.unpack("<Q", take(8))
        store = cls()
        for _ in range(count):
            (nlen,) = struct.unpack("<Q", take(8))
            name = take(nlen).decode("utf-8")
            (rank,) = struct.unpack("<Q", take(8))
            dims = struct.unpack(f"<{rank}Q", take(8 * rank))
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            vals = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
            store[name] = vals.reshape(dims)
        if pos != len(buf):
            raise CheckpointError("trailing bytes after last record")
        return store

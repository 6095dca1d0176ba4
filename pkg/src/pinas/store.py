"""Named, ordered array store with a stable binary serialization.

File layout (all little-endian):

    8 bytes   magic b"PNSTORE1"
    4 bytes   u32 header length H
    H bytes   UTF-8 JSON manifest {"version": 1, "entries": [
                  {"name", "dtype", "shape", "nbytes"}, ...]}
    ...       each entry's raw array bytes, concatenated in manifest order

Entry order is preserved exactly, so identical stores serialize to identical
bytes and the sha256 checksum is a faithful content hash.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, IngestionError

MAGIC = b"PNSTORE1"

_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4", "int64": "<i8"}


class ParameterStore:
    """Ordered name -> ndarray map for parameters and buffers."""

    def __init__(self, entries: dict[str, np.ndarray] | None = None):
        self._entries: dict[str, np.ndarray] = {}
        if entries:
            for name, arr in entries.items():
                self.set(name, arr)

    def set(self, name: str, arr: np.ndarray) -> None:
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise ContractError(f"store: unsupported dtype {arr.dtype} for '{name}'")
        self._entries[name] = arr

    def get(self, name: str) -> np.ndarray:
        if name not in self._entries:
            raise ContractError(f"store: no entry named '{name}'")
        return self._entries[name]

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, arr in self._entries.items():
            out._entries[name] = arr.copy()
        return out

    def to_bytes(self) -> bytes:
        entries = []
        blobs = []
        for name, arr in self._entries.items():
            le = np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name])
            raw = le.tobytes()
            entries.append(
                {
                    "name": name,
                    "dtype": arr.dtype.name,
                    "shape": list(arr.shape),
                    "nbytes": len(raw),
                }
            )
            blobs.append(raw)
        header = json.dumps({"version": 1, "entries": entries}).encode("utf-8")
        return MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParameterStore":
        if data[:8] != MAGIC:
            raise IngestionError(f"store: bad magic {data[:8]!r} at byte 0")
        if len(data) < 12:
            raise IngestionError("store: truncated header length field at byte 8")
        (hlen,) = struct.unpack("<I", data[8:12])
        if len(data) < 12 + hlen:
            raise IngestionError(f"store: truncated manifest, need {hlen} bytes at byte 12")
        try:
            manifest = json.loads(data[12 : 12 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IngestionError(f"store: unreadable manifest at byte 12: {exc}") from exc
        if manifest.get("version") != 1:
            raise IngestionError(f"store: unsupported version {manifest.get('version')}")
        store = cls()
        off = 12 + hlen
        for ent in manifest["entries"]:
            name, dt, shape, nbytes = ent["name"], ent["dtype"], ent["shape"], ent["nbytes"]
            if dt not in _DTYPES:
                raise IngestionError(f"store: unknown dtype '{dt}' for entry '{name}'")
            if off + nbytes > len(data):
                raise IngestionError(
                    f"store: entry '{name}' wants {nbytes} bytes at byte {off}, "
                    f"file has {len(data)}"
                )
            arr = np.frombuffer(data[off : off + nbytes], dtype=_DTYPES[dt]).reshape(shape)
            store._entries[name] = arr.astype(dt).copy()
            off += nbytes
        if off != len(data):
            raise IngestionError(f"store: {len(data) - off} trailing bytes at byte {off}")
        return store

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ParameterStore":
        return cls.from_bytes(Path(path).read_bytes())

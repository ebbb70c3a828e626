"""Named-tensor parameter store and its on-disk archive format.

Archive layout (little-endian throughout)::

    magic   8 bytes  b"NTAR0001"
    u32     metadata length, then metadata as UTF-8 JSON
    u32     tensor count
    per tensor, in insertion order:
        u16     name length, then name as UTF-8
        u8      dtype tag (0 = float32, the only tag)
        u8      ndim
        u32*ndim dims
        raw C-order tensor bytes
    sha256  32-byte digest of everything above

Loading verifies the magic, the digest and name uniqueness, so archives
round-trip bit-exactly or fail loudly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from typing import Iterable

import numpy as np

from .errors import IntegrityError

__all__ = ["ParamStore", "save_params", "load_params", "load_archive"]

_MAGIC = b"NTAR0001"
_DTYPE_TAGS = {0: np.dtype("<f4")}


class ParamStore(OrderedDict):
    """Ordered mapping from hierarchical tensor name to numpy array.

    Names use dot-separated paths ending in ``.weight`` or ``.bias``,
    which doubles as the tensor's role tag.
    """

    @staticmethod
    def role(name: str) -> str:
        tail = name.rsplit(".", 1)[-1]
        if tail not in ("weight", "bias"):
            raise IntegrityError(f"parameter name {name!r} carries no weight/bias role")
        return tail

    def subset(self, prefix: str) -> "ParamStore":
        p = prefix if prefix.endswith(".") else prefix + "."
        return ParamStore((k, v) for k, v in self.items() if k.startswith(p))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self):
            arr = np.ascontiguousarray(self[name])
            h.update(name.encode("utf-8"))
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def validate_names(self, expected: Iterable[str], context: str = "parameter set") -> None:
        expected = list(expected)
        missing = [n for n in expected if n not in self]
        extra = [n for n in self if n not in set(expected)]
        if missing or extra:
            parts = []
            if missing:
                parts.append("missing: " + ", ".join(sorted(missing)))
            if extra:
                parts.append("unexpected: " + ", ".join(sorted(extra)))
            raise IntegrityError(f"{context} integrity failure ({'; '.join(parts)})")

    def astype(self, dtype) -> "ParamStore":
        return ParamStore((k, v.astype(dtype)) for k, v in self.items())


def save_params(store: ParamStore, path, metadata: dict | None = None) -> None:
    """Write ``store`` (float32 tensors) plus JSON metadata to ``path``."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    chunks = [_MAGIC, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(store))]
    for name, arr in store.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", 0, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(digest)


def load_archive(path) -> tuple[ParamStore, dict]:
    """Read an archive; returns (store, metadata). Verifies magic and digest."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 36 or blob[: len(_MAGIC)] != _MAGIC:
        raise IntegrityError(f"{path}: not a tensor archive (bad magic)")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch, archive corrupted")
    off = len(_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(payload):
            raise IntegrityError(f"{path}: truncated archive")
        out = payload[off : off + n]
        off += n
        return out

    (meta_len,) = struct.unpack("<I", take(4))
    metadata = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    store = ParamStore()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2))
        if tag not in _DTYPE_TAGS:
            raise IntegrityError(f"{path}: unknown dtype tag {tag} for {name!r}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _DTYPE_TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).copy()
        if name in store:
            raise IntegrityError(f"{path}: duplicate tensor name {name!r}")
        store[name] = arr
    if off != len(payload):
        raise IntegrityError(f"{path}: trailing bytes after last tensor")
    return store, metadata


def load_params(path, expected_names: Iterable[str] | None = None) -> ParamStore:
    """Load an archive's tensors; optionally enforce the exact name set."""
    store, _ = load_archive(path)
    if expected_names is not None:
        store.validate_names(expected_names, context=str(path))
    return store

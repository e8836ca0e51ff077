"""Binary checkpoint format.

Layout (all integers and reals little-endian)::

    b"CKCA" | u32 version | u64 body length | body | u64 checksum

The body is a sequence of sections, each ``4-byte tag | u64 length | payload``.
The checksum is an 8-byte BLAKE2b digest over everything before it.  META is
UTF-8 JSON holding only integers and strings; every real number lives in a
binary section as float64.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..baselines import FisherDiag
from ..ckca import CentroidStore
from ..nn import ModelParams
from ..stream import ReplayMemory

MAGIC = b"CKCA"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_SECTION = struct.Struct("<4sQ")
_F64 = np.dtype("<f8")
_I64 = np.dtype("<i8")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    stage: int
    params: ModelParams
    velocity: ModelParams
    chunk_sizes: list[int]
    rng: dict[str, Any]
    method: str = "ckca"
    store: CentroidStore | None = None
    fisher: FisherDiag | None = None
    memory: ReplayMemory | None = None
    version: int = VERSION
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def layer_sizes(self) -> list[int]:
        return self.params.layer_sizes


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _f64(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype=_F64).tobytes()


def _params_bytes(p: ModelParams) -> bytes:
    return b"".join(_f64(a) for a in p.arrays())


def _params_from(buf: bytes, layer_sizes: list[int]) -> ModelParams:
    template = ModelParams(
        [np.zeros((o, i)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])],
        [np.zeros(o) for o in layer_sizes[1:]])
    vals = np.frombuffer(buf, dtype=_F64)
    if vals.size != template.size:
        raise CheckpointError("parameter section has the wrong size")
    return template.with_flat(vals.astype(np.float64))


def _store_bytes(store: CentroidStore) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<III", store.k, store.feature_dim, len(store.centroids)))
    for c in store.classes():
        cents = store.centroids[c]
        out.write(struct.pack("<II", c, len(cents)))
        out.write(_f64(cents))
        out.write(np.asarray(store.counts[c], dtype=_I64).tobytes())
    return out.getvalue()


def _store_from(buf: bytes) -> CentroidStore:
    k, dim, ncls = struct.unpack_from("<III", buf, 0)
    pos = 12
    store = CentroidStore(k, dim)
    for _ in range(ncls):
        c, kc = struct.unpack_from("<II", buf, pos)
        pos += 8
        store.centroids[c] = np.frombuffer(buf, _F64, kc * dim, pos).reshape(kc, dim).astype(np.float64)
        pos += 8 * kc * dim
        store.counts[c] = np.frombuffer(buf, _I64, kc, pos).astype(np.int64)
        pos += 8 * kc
    return store


def _memory_bytes(mem: ReplayMemory) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<QI", mem.capacity, len(mem.exemplars)))
    for c in sorted(mem.exemplars):
        ids = mem.exemplars[c]
        out.write(struct.pack("<II", c, len(ids)))
        out.write(np.asarray(ids, dtype=_I64).tobytes())
    return out.getvalue()


def _memory_from(buf: bytes) -> ReplayMemory:
    cap, ncls = struct.unpack_from("<QI", buf, 0)
    pos = 12
    mem = ReplayMemory(cap)
    for _ in range(ncls):
        c, n = struct.unpack_from("<II", buf, pos)
        pos += 8
        mem.exemplars[c] = [int(v) for v in np.frombuffer(buf, _I64, n, pos)]
        pos += 8 * n
    return mem


def dumps(ck: Checkpoint) -> bytes:
    meta = {
        "layer_sizes": ck.layer_sizes,
        "stage": ck.stage,
        "chunk_sizes": [int(s) for s in ck.chunk_sizes],
        "method": ck.method,
        "rng": ck.rng,
        "extra": ck.extra,
    }
    sections = [
        (b"META", json.dumps(meta, sort_keys=True).encode()),
        (b"PARM", _params_bytes(ck.params)),
        (b"VELO", _params_bytes(ck.velocity)),
    ]
    if ck.store is not None:
        sections.append((b"CENT", _store_bytes(ck.store)))
    if ck.fisher is not None:
        sections.append((b"FISH", _params_bytes(ck.fisher.values) + _params_bytes(ck.fisher.anchor)))
    if ck.memory is not None:
        sections.append((b"MEMO", _memory_bytes(ck.memory)))
    body = b"".join(_SECTION.pack(tag, len(data)) + data for tag, data in sections)
    head = _HEADER.pack(MAGIC, ck.version, len(body)) + body
    return head + _digest(head)


def loads(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise TruncatedCheckpointError("file shorter than the header")
    magic, version, body_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    expected = _HEADER.size + body_len + 8
    if len(data) < expected:
        raise TruncatedCheckpointError(f"expected {expected} bytes, found {len(data)}")
    if len(data) > expected:
        raise CheckpointError(f"{len(data) - expected} trailing bytes after checksum")
    if _digest(data[:-8]) != data[-8:]:
        raise ChecksumError("checksum mismatch")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")

    sections: dict[bytes, bytes] = {}
    pos, end = _HEADER.size, _HEADER.size + body_len
    while pos < end:
        tag, n = _SECTION.unpack_from(data, pos)
        pos += _SECTION.size
        sections[tag] = data[pos:pos + n]
        pos += n
    try:
        meta = json.loads(sections[b"META"])
        sizes = meta["layer_sizes"]
        ck = Checkpoint(
            stage=meta["stage"],
            params=_params_from(sections[b"PARM"], sizes),
            velocity=_params_from(sections[b"VELO"], sizes),
            chunk_sizes=meta["chunk_sizes"],
            rng=meta["rng"],
            method=meta["method"],
            version=version,
            extra=meta.get("extra", {}),
        )
    except KeyError as exc:
        raise CheckpointError(f"missing section or field {exc}") from exc
    if b"CENT" in sections:
        ck.store = _store_from(sections[b"CENT"])
    if b"FISH" in sections:
        half = len(sections[b"FISH"]) // 2
        ck.fisher = FisherDiag(_params_from(sections[b"FISH"][:half], sizes),
                               _params_from(sections[b"FISH"][half:], sizes))
    if b"MEMO" in sections:
        ck.memory = _memory_from(sections[b"MEMO"])
    return ck


def save_checkpoint(path: str | Path, ck: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ck))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def describe(ck: Checkpoint) -> dict[str, Any]:
    """JSON-friendly summary used by ``inspect-checkpoint``."""
    info: dict[str, Any] = {
        "version": ck.version,
        "method": ck.method,
        "stage": ck.stage,
        "layer_sizes": ck.layer_sizes,
        "num_params": ck.params.size,
        "chunk_sizes": ck.chunk_sizes,
        "rng": ck.rng,
        "params_finite": ck.params.all_finite(),
    }
    if ck.store is not None:
        info["centroids"] = {"k": ck.store.k, "feature_dim": ck.store.feature_dim,
                             "classes": ck.store.classes()}
    if ck.fisher is not None:
        info["fisher_total"] = float(ck.fisher.values.flat().sum())
    if ck.memory is not None:
        info["memory"] = {"capacity": ck.memory.capacity, "stored": len(ck.memory)}
    return info

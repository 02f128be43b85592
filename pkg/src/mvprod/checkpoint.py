"""Length-prefixed binary checkpoint container.

Layout (all little-endian):

    magic  b"MVPC"
    u16    container version (1)
    u64    training step
    32B    sha256 of the canonical config JSON
    u32    record count
    records...

Each record is ``u32 payload_length`` followed by the payload. Payload
kind is its first byte:

    1  named array  : u16 name_len | name utf8 | u8 ndim | u32*ndim | f32 data
    2  bank entry   : u8 side (0 mv, 1 prod) | i64 instance id | i32 level-1 |
                      i32 level-2 | i64 enqueue step | u32 dim | f32 data
    3  meta JSON    : utf8 bytes

Arrays cover parameters (``param/<role>/<name>``), batch-norm running
statistics (``bn/<role>/<stat>``) and Adam moments
(``adam/<role>/<name>/<moment>``); Adam step counters ride in the meta
record. Values are stored as float32 regardless of training precision.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .membank import QueueEntry

MAGIC = b"MVPC"
VERSION = 1

_KIND_ARRAY = 1
_KIND_BANK = 2
_KIND_META = 3

_SIDES = ("mv", "prod")


class CheckpointError(RuntimeError):
    pass


@dataclass
class CheckpointBundle:
    step: int
    config_hash: bytes
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    bank_entries: dict[str, list[QueueEntry]] = field(default_factory=lambda: {"mv": [], "prod": []})
    meta: dict = field(default_factory=dict)


def _encode_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode()
    parts = [struct.pack("<BH", _KIND_ARRAY, len(name_b)), name_b, struct.pack("<B", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
    parts.append(arr.tobytes())
    return b"".join(parts)


def _encode_bank_entry(side: str, entry: QueueEntry) -> bytes:
    emb = np.ascontiguousarray(entry.embedding, dtype="<f4")
    head = struct.pack(
        "<BBqiiqI",
        _KIND_BANK,
        _SIDES.index(side),
        int(entry.instance_id),
        int(entry.path[0]),
        int(entry.path[1]),
        int(entry.step),
        emb.size,
    )
    return head + emb.tobytes()


def write_checkpoint(path, *, step: int, config_hash: bytes, arrays: dict, bank_entries=None, meta=None) -> None:
    records = [_encode_array(name, arr) for name, arr in sorted(arrays.items())]
    for side in _SIDES:
        for entry in (bank_entries or {}).get(side, []):
            records.append(_encode_bank_entry(side, entry))
    records.append(struct.pack("<B", _KIND_META) + json.dumps(meta or {}, sort_keys=True).encode())

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HQ", VERSION, step))
        fh.write(config_hash.ljust(32, b"\0")[:32])
        fh.write(struct.pack("<I", len(records)))
        for rec in records:
            fh.write(struct.pack("<I", len(rec)))
            fh.write(rec)


def read_checkpoint(path) -> CheckpointBundle:
    raw = open(path, "rb").read()
    if len(raw) < 4 + 10 + 32 + 4 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    version, step = struct.unpack_from("<HQ", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config_hash = raw[14:46]
    (n_records,) = struct.unpack_from("<I", raw, 46)
    bundle = CheckpointBundle(step=step, config_hash=config_hash)

    pos = 50
    for _ in range(n_records):
        if pos + 4 > len(raw):
            raise CheckpointError(f"{path}: truncated record table")
        (length,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        payload = raw[pos : pos + length]
        if len(payload) != length:
            raise CheckpointError(f"{path}: truncated record payload")
        pos += length
        kind = payload[0]
        if kind == _KIND_ARRAY:
            (name_len,) = struct.unpack_from("<H", payload, 1)
            name = payload[3 : 3 + name_len].decode()
            off = 3 + name_len
            ndim = payload[off]
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", payload, off) if ndim else ()
            off += 4 * ndim
            arr = np.frombuffer(payload, dtype="<f4", offset=off).reshape(shape).copy()
            bundle.arrays[name] = arr
        elif kind == _KIND_BANK:
            side_idx, inst, l1, l2, estep, dim = struct.unpack_from("<BqiiqI", payload, 1)
            off = 1 + struct.calcsize("<BqiiqI")
            emb = np.frombuffer(payload, dtype="<f4", offset=off, count=dim).copy()
            bundle.bank_entries[_SIDES[side_idx]].append(
                QueueEntry(embedding=emb, instance_id=inst, path=(l1, l2), step=estep)
            )
        elif kind == _KIND_META:
            bundle.meta = json.loads(payload[1:].decode())
        else:
            raise CheckpointError(f"{path}: unknown record kind {kind}")
    return bundle

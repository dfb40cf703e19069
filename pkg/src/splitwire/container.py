"""Binary container shared by model (``SWML``) and dataset (``SWDS``) files.

Layout, little-endian throughout::

    magic        4 bytes   b"SWML" or b"SWDS"
    version      u16
    count        u32       number of records
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON (file-level metadata)
    count x record:
        tag_len  u8,  tag   ASCII kind tag (e.g. "conv2d")
        hyp_len  u32, hyp   UTF-8 JSON hyperparameters
        n_tensor u16
        n_tensor x tensor:
            name_len u8, name  ASCII
            ndim     u8
            dims     ndim x u32
            data     prod(dims) x f64

JSON is written with sorted keys so identical content gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

VERSION = 1


class ContainerError(ValueError):
    pass


@dataclass
class Record:
    tag: str
    hyper: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def dumps(magic: bytes, meta: dict, records: list[Record]) -> bytes:
    if len(magic) != 4:
        raise ContainerError("magic must be 4 bytes")
    meta_b = _json(meta)
    out = [magic, struct.pack("<HII", VERSION, len(records), len(meta_b)), meta_b]
    for rec in records:
        tag = rec.tag.encode("ascii")
        hyp = _json(rec.hyper)
        out += [struct.pack("<B", len(tag)), tag, struct.pack("<I", len(hyp)), hyp,
                struct.pack("<H", len(rec.tensors))]
        for name, arr in rec.tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            nb = name.encode("ascii")
            out += [struct.pack("<B", len(nb)), nb, struct.pack("<B", arr.ndim),
                    struct.pack(f"<{arr.ndim}I", *arr.shape),
                    np.ascontiguousarray(arr).tobytes()]
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ContainerError("truncated container")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes, magic: bytes) -> tuple[dict, list[Record]]:
    r = _Reader(data)
    got = r.take(4)
    if got != magic:
        raise ContainerError(f"bad magic {got!r}, expected {magic!r}")
    version, count, meta_len = r.unpack("<HII")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    meta = json.loads(r.take(meta_len))
    records = []
    for _ in range(count):
        (tl,) = r.unpack("<B")
        tag = r.take(tl).decode("ascii")
        (hl,) = r.unpack("<I")
        hyper = json.loads(r.take(hl))
        (nt,) = r.unpack("<H")
        tensors = {}
        for _ in range(nt):
            (nl,) = r.unpack("<B")
            name = r.take(nl).decode("ascii")
            (ndim,) = r.unpack("<B")
            dims = r.unpack(f"<{ndim}I")
            n = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims)
            tensors[name] = arr.astype(np.float64)
        records.append(Record(tag, hyper, tensors))
    if r.pos != len(data):
        raise ContainerError(f"{len(data) - r.pos} trailing bytes after last record")
    return meta, records

"""Binary bag files (``MILB``) and their signal-mask sidecars.

Layout, little-endian throughout::

    b"MILB" | version u32 | id length u32 | id utf-8 | label u8 | K u32 | M u32
    | K x (row u32, col u32) | K x M float32 row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from wsimil.pooling import Bag

MAGIC = b"MILB"
VERSION = 1
SUFFIX = ".milb"


def encode_bag(bag: Bag) -> bytes:
    sid = bag.slide_id.encode("utf-8")
    k, m = bag.instances.shape
    parts = [
        MAGIC,
        struct.pack("<II", VERSION, len(sid)),
        sid,
        struct.pack("<BII", bag.label, k, m),
        np.ascontiguousarray(bag.coords, dtype="<u4").tobytes(),
        np.ascontiguousarray(bag.instances, dtype="<f4").tobytes(),
    ]
    return b"".join(parts)


def decode_bag(data: bytes, source="<bytes>") -> Bag:
    if data[:4] != MAGIC:
        raise ValueError(f"{source}: not a bag file (bad magic)")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{source}: unsupported bag file version {version}")
    off = 12
    sid = data[off:off + n].decode("utf-8")
    off += n
    label, k, m = struct.unpack_from("<BII", data, off)
    off += 9
    expected = off + 8 * k + 4 * k * m
    if len(data) != expected:
        raise ValueError(f"{source}: payload is {len(data)} bytes, header implies {expected}")
    coords = np.frombuffer(data, dtype="<u4", count=2 * k, offset=off).reshape(k, 2)
    off += 8 * k
    feats = np.frombuffer(data, dtype="<f4", count=k * m, offset=off).reshape(k, m)
    return Bag(sid, feats.astype(np.float64), coords.astype(np.int64), label)


def write_bag(path, bag: Bag):
    Path(path).write_bytes(encode_bag(bag))


def read_bag(path) -> Bag:
    return decode_bag(Path(path).read_bytes(), source=path)


def bag_path(out_dir, slide_id: str) -> Path:
    return Path(out_dir) / f"{slide_id}{SUFFIX}"


def read_bag_dir(directory):
    """All bags in a directory, sorted by file name."""
    paths = sorted(Path(directory).glob(f"*{SUFFIX}"))
    if not paths:
        raise FileNotFoundError(f"no {SUFFIX} files in {directory}")
    return [read_bag(p) for p in paths]


def write_mask(path, slide_id: str, mask):
    mask = np.asarray(mask, dtype=bool)
    rec = {"slide_id": slide_id, "K": int(mask.size),
           "signal": [int(i) for i in np.flatnonzero(mask)]}
    Path(path).write_text(json.dumps(rec) + "\n")


def read_mask(path):
    rec = json.loads(Path(path).read_text())
    mask = np.zeros(rec["K"], dtype=bool)
    mask[rec["signal"]] = True
    return rec["slide_id"], mask


def mask_path(out_dir, slide_id: str) -> Path:
    return Path(out_dir) / f"{slide_id}.mask.json"

"""Checkpoint files.

Layout::

    COSAMCKPT1\\n
    u64 little-endian manifest byte length
    manifest (UTF-8): optional "#meta <json>" line, then one
                      "name<TAB>d0,d1,...<TAB>offset" line per tensor
    payload: CTF1 records back to back; offsets are relative to the payload start
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict

import numpy as np

from . import ctf

HEADER = b"COSAMCKPT1\n"


class CheckpointError(ValueError):
    pass


def dumps(state: dict, meta: dict | None = None) -> bytes:
    records, lines = [], []
    if meta is not None:
        lines.append("#meta " + json.dumps(meta, sort_keys=True))
    offset = 0
    for name, arr in state.items():
        if "\t" in name or "\n" in name:
            raise CheckpointError(f"invalid tensor name {name!r}")
        rec = ctf.encode(np.asarray(arr))
        shape = ",".join(str(d) for d in np.shape(arr))
        lines.append(f"{name}\t{shape}\t{offset}")
        records.append(rec)
        offset += len(rec)
    manifest = ("\n".join(lines) + "\n").encode()
    return HEADER + struct.pack("<Q", len(manifest)) + manifest + b"".join(records)


def loads(blob: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    if not blob.startswith(HEADER):
        raise CheckpointError("not a COSAMCKPT1 file")
    pos = len(HEADER)
    (mlen,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    manifest = blob[pos : pos + mlen].decode()
    payload = blob[pos + mlen :]
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    meta: dict = {}
    for line in manifest.splitlines():
        if not line:
            continue
        if line.startswith("#meta "):
            meta = json.loads(line[6:])
            continue
        name, shape, offset = line.split("\t")
        arr = ctf.decode(payload[int(offset) :])
        dims = tuple(int(d) for d in shape.split(",")) if shape else ()
        if arr.shape != dims:
            raise CheckpointError(f"{name}: manifest shape {dims} != payload {arr.shape}")
        state[name] = arr
    return state, meta


def save(path: str | os.PathLike, state: dict, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(state, meta))


def load(path: str | os.PathLike):
    with open(path, "rb") as fh:
        return loads(fh.read())

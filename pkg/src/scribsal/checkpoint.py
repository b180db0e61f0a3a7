"""Checkpoint archive: JSON header followed by raw little-endian float32 tensors.

Layout::

    bytes 0..8    header length, little-endian uint64
    bytes 8..8+n  header, UTF-8 JSON
    remainder     tensor payload, concatenated <f4 buffers

The header carries ``meta`` (configs, counters, version tag) and a ``tensors``
index mapping name -> {shape, offset} into the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import IoError

FORMAT_VERSION = 1


def save_archive(
    path: str | Path, meta: dict, tensors: dict[str, torch.Tensor]
) -> Path:
    path = Path(path)
    index = {}
    payload = []
    offset = 0
    for name, t in tensors.items():
        # tobytes() serializes in C order; astype pins dtype and endianness
        # (plain ascontiguousarray would promote 0-dim tensors to 1-dim)
        arr = t.detach().cpu().numpy().astype("<f4")
        index[name] = {"shape": list(arr.shape), "offset": offset}
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"version": FORMAT_VERSION, "meta": meta, "tensors": index}
    ).encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for chunk in payload:
                fh.write(chunk)
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}") from e
    return path


def load_archive(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise IoError(f"unsupported checkpoint version {header.get('version')}")
    payload = raw[8 + hlen :]
    tensors = {}
    for name, spec in header["tensors"].items():
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = spec["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        tensors[name] = torch.from_numpy(arr.copy().reshape(shape))
    return header["meta"], tensors

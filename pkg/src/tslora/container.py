"""On-disk container shared by model checkpoints, adapter sets and datasets.

Layout (all three file kinds)::

    tslora-ckpt v1\\n
    <one line of JSON>\\n
    <raw little-endian float64 bytes>

The JSON line is an object with keys ``kind`` (``"model"``, ``"adapters"`` or
``"dataset"``), ``meta`` (kind-specific, e.g. the model config) and
``arrays``: a list of ``[name, shape]`` pairs. The binary payload is the
concatenation of every array, C order, in exactly that list order. JSON is
written with sorted keys so identical content gives identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = "tslora-ckpt v1"
_DTYPE = np.dtype("<f8")


def write_container(path, kind: str, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    header = {
        "kind": kind,
        "meta": meta,
        "arrays": [[name, list(np.shape(a))] for name, a in arrays.items()],
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    with open(Path(path), "wb") as fh:
        fh.write(f"{MAGIC}\n".encode())
        fh.write(line.encode() + b"\n")
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype=_DTYPE).tobytes())


def read_container(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    if first < 0 or raw[:first].decode(errors="replace") != MAGIC:
        raise FormatError(f"{path}: missing '{MAGIC}' header")
    second = raw.find(b"\n", first + 1)
    if second < 0:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[first + 1:second])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad header JSON ({exc})") from exc
    payload = memoryview(raw)[second + 1:]
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in header["arrays"]:
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * _DTYPE.itemsize
        if offset + nbytes > len(payload):
            raise FormatError(f"{path}: payload too short for array {name!r}")
        arrays[name] = np.frombuffer(payload[offset:offset + nbytes], dtype=_DTYPE).astype(
            np.float64).reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise FormatError(f"{path}: {len(payload) - offset} trailing bytes")
    return header["kind"], header["meta"], arrays

"""Versioned binary checkpoint for refiner weights, optimizer state, and the
prototype buffer.

Layout: magic ``PSEG`` | u32 version | u64 header length | canonical JSON
header | raw little-endian float64 buffers in header order. The encoding is
fully deterministic, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .refiner import PrototypeBuffer, RefinerDims, RefinerParams, SgdState

_MAGIC = b"PSEG"
_VERSION = 1


@dataclass
class Checkpoint:
    params: RefinerParams
    opt_state: SgdState
    buffer: PrototypeBuffer
    rng_seed: int


def _named_arrays(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    arrays = [
        ("params/w1", ck.params.w1),
        ("params/b1", ck.params.b1),
        ("params/w2", ck.params.w2),
        ("params/b2", ck.params.b2),
    ]
    for i, v in enumerate(ck.opt_state.vel):
        arrays.append((f"opt/vel{i}", v))
    for bi, batch in enumerate(ck.buffer.batches()):
        for ci, arr in enumerate(batch):
            arrays.append((f"proto/b{bi:04d}/c{ci:03d}", arr))
    return arrays


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    arrays = _named_arrays(ck)
    entries = []
    offset = 0
    for name, arr in arrays:
        nbytes = arr.size * 8
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += nbytes
    d = ck.params.dims
    header = {
        "version": _VERSION,
        "dims": {
            "stem": d.stem,
            "hidden": d.hidden,
            "feature": d.feature,
            "num_classes": d.num_classes,
        },
        "buffer": {
            "max_batches": ck.buffer.max_batches,
            "batch_count": ck.buffer.batch_count,
            "stored_batches": len(ck.buffer.batches()),
        },
        "rng_seed": ck.rng_seed,
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise FormatError("magic", "not a refiner checkpoint")
    if len(data) < 16:
        raise FormatError("truncated", "checkpoint shorter than its fixed header")
    version, header_len = struct.unpack("<IQ", data[4:16])
    if version != _VERSION:
        raise FormatError("header", f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError("header", f"bad checkpoint header: {e}") from e
    body = data[16 + header_len :]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        raw = body[start : start + count * 8]
        if len(raw) < count * 8:
            raise FormatError("truncated", f"array {entry['name']} exceeds file size")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    dims = RefinerDims(**header["dims"])
    params = RefinerParams(
        dims=dims,
        w1=arrays["params/w1"],
        b1=arrays["params/b1"],
        w2=arrays["params/w2"],
        b2=arrays["params/b2"],
    )
    params.validate()
    vel = tuple(arrays[f"opt/vel{i}"] for i in range(4))
    binfo = header["buffer"]
    batches = []
    for bi in range(binfo["stored_batches"]):
        batches.append([arrays[f"proto/b{bi:04d}/c{ci:03d}"] for ci in range(dims.num_classes)])
    buf = PrototypeBuffer.restore(
        num_classes=dims.num_classes,
        feature_dim=dims.feature,
        max_batches=binfo["max_batches"],
        batch_count=binfo["batch_count"],
        batches=batches,
    )
    return Checkpoint(
        params=params,
        opt_state=SgdState(vel=vel),
        buffer=buf,
        rng_seed=int(header["rng_seed"]),
    )

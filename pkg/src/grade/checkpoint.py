"""Self-describing binary checkpoints.

Layout: 8 magic bytes, a little-endian uint64 header length, a UTF-8 JSON
header, then every array as contiguous little-endian float64 in header order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .inference import GradeModel, RecurrentState, TrainConfig

MAGIC = b"GRADECKP"
FORMAT_VERSION = 1
_STATE_FIELDS = ("h_node", "h_comm", "phi", "beta", "pi")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: GradeModel
    state: RecurrentState  # recursion state after the last train step
    split: tuple[int, int, int]
    extra: dict


def save_checkpoint(path: str | Path, model: GradeModel, state: RecurrentState,
                    split: tuple[int, int, int], extra: dict | None = None) -> None:
    arrays = {name: p.value for name, p in model.named_parameters().items()}
    arrays.update({f"state.{f}": getattr(state, f) for f in _STATE_FIELDS})
    entries, offset = [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "N": model.gen.N,
        "split": list(split),
        "state_t": state.t,
        "extra": extra or {},
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_header(path: str | Path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version!r}, "
                              f"this build reads version {FORMAT_VERSION}")
    return header, len(MAGIC) + 8 + n


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, start = read_header(path)
    raw = Path(path).read_bytes()[start:]
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated array {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8", count=count,
                                          offset=e["offset"]).astype(np.float64).reshape(e["shape"])

    config = TrainConfig.from_dict(header["config"])
    model = GradeModel.init(header["N"], config)
    for name, p in model.named_parameters().items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing array {name}")
        if arrays[name].shape != p.value.shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {p.value.shape}")
        p.value = arrays[name].copy()
    try:
        state = RecurrentState(header["state_t"], *(arrays[f"state.{f}"] for f in _STATE_FIELDS))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing recursion state {exc}") from None
    return Checkpoint(model, state, tuple(header["split"]), header.get("extra", {}))

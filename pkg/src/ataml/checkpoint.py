"""Binary checkpoints.

Layout::

    b"ATAMLCK1"                    8-byte magic
    uint32 LE                      header length in bytes
    header                         UTF-8 JSON, sorted keys
    payloads                       raw little-endian arrays, in header order

The header records the config hash, the iteration, the training seed and one
entry per tensor (name, shape, dtype tag, partition, offset, nbytes).  Adam
moments are stored as extra entries in the "optimizer" partition so training
can resume.  Writing the same state twice gives the same bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import AdamState, Tensor
from .model import PartitionedParams

MAGIC = b"ATAMLCK1"
_DTYPES = {"f8": np.dtype("<f8"), "f4": np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_hash: str
    iteration: int
    seed: int
    shared: dict  # name -> ndarray
    task_specific: dict
    adam: Optional[AdamState] = None
    extra: dict = field(default_factory=dict)

    def to_params(self) -> PartitionedParams:
        return PartitionedParams(
            {k: Tensor(v.copy(), requires_grad=True) for k, v in self.shared.items()},
            {k: Tensor(v.copy(), requires_grad=True) for k, v in self.task_specific.items()},
        )


def _tag(arr: np.ndarray) -> str:
    for tag, dt in _DTYPES.items():
        if arr.dtype == dt.newbyteorder("=") or arr.dtype == dt:
            return tag
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def save_checkpoint(
    path: str | Path,
    params: PartitionedParams,
    config_hash: str,
    iteration: int,
    seed: int,
    adam: Optional[AdamState] = None,
    extra: Optional[dict] = None,
) -> None:
    entries = []
    blobs = []
    offset = 0

    def add(name, arr, partition):
        nonlocal offset
        arr = np.asarray(arr)
        tag = _tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": tag, "partition": partition, "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)

    for name in sorted(params.shared):
        add(name, params.shared[name].data, "shared")
    for name in sorted(params.task_specific):
        add(name, params.task_specific[name].data, "task")
    adam_step = None
    if adam is not None and adam.step > 0:
        adam_step = adam.step
        for name in sorted(adam.m):
            add(f"adam.m/{name}", adam.m[name], "optimizer")
            add(f"adam.v/{name}", adam.v[name], "optimizer")
    header = {
        "config_hash": config_hash,
        "iteration": int(iteration),
        "seed": int(seed),
        "adam_step": adam_step,
        "extra": extra or {},
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_header(path: str | Path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    return header, len(MAGIC) + 4 + n


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, start = read_header(path)
    raw = Path(path).read_bytes()[start:]
    shared, task, m, v = {}, {}, {}, {}
    for e in header["tensors"]:
        chunk = raw[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"truncated payload for {e['name']}")
        arr = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).astype(_DTYPES[e["dtype"]].newbyteorder("="))
        part = e["partition"]
        if part == "shared":
            shared[e["name"]] = arr
        elif part == "task":
            task[e["name"]] = arr
        elif e["name"].startswith("adam.m/"):
            m[e["name"][7:]] = arr
        else:
            v[e["name"][7:]] = arr
    adam = AdamState(header["adam_step"], m, v) if header.get("adam_step") else None
    return Checkpoint(header["config_hash"], header["iteration"], header["seed"], shared, task, adam, header.get("extra", {}))

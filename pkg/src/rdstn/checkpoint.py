"""Checkpoint container.

Layout::

    b"RDSTNCKP"  | u64 LE header length | UTF-8 JSON header | raw array blob

The header holds configs, step, metric history, a directory of named
arrays (shape, byte offset, byte length) and the SHA-256 of the blob.
Arrays are little-endian float32. Optimizer moments are stored alongside
the model weights so training resumes bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RDSTNCKP"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, truncated or tampered checkpoint file."""


class ConfigMismatchError(ValueError):
    def __init__(self, diffs: dict):
        self.diffs = diffs
        detail = ", ".join(f"{k}: checkpoint={a!r} expected={b!r}" for k, (a, b) in sorted(diffs.items()))
        super().__init__(f"checkpoint config mismatch ({detail})")


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    model_config: dict
    train_config: dict = field(default_factory=dict)
    step: int = 0
    history: list = field(default_factory=list)
    optimizer_meta: dict = field(default_factory=dict)
    checksum: str = ""

    def model_state(self) -> dict[str, torch.Tensor]:
        return {
            k[len("model."):]: torch.from_numpy(v.copy())
            for k, v in self.arrays.items()
            if k.startswith("model.")
        }


def _blob(arrays: dict[str, np.ndarray]):
    directory = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw = arr.tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return directory, b"".join(chunks)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> str:
    """Write atomically; returns the content checksum."""
    directory, blob = _blob(ckpt.arrays)
    checksum = hashlib.sha256(blob).hexdigest()
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "step": ckpt.step,
        "history": ckpt.history,
        "optimizer": ckpt.optimizer_meta,
        "arrays": directory,
        "checksum": checksum,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(blob)
    os.replace(tmp, path)
    ckpt.checksum = checksum
    return checksum


def load_checkpoint(path: str | Path, expected_model_config: dict | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or truncated header)")
    (head_len,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start : start + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt or truncated header") from exc
    blob = data[start + head_len :]
    if hashlib.sha256(blob).hexdigest() != header.get("checksum"):
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupted)")
    arrays = {}
    for entry in header["arrays"]:
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
    if expected_model_config is not None:
        check_config(header["model_config"], expected_model_config)
    return Checkpoint(
        arrays=arrays,
        model_config=header["model_config"],
        train_config=header.get("train_config", {}),
        step=int(header.get("step", 0)),
        history=header.get("history", []),
        optimizer_meta=header.get("optimizer", {}),
        checksum=header["checksum"],
    )


def check_config(found: dict, expected: dict, prefix: str = "") -> None:
    diffs = {}
    _diff(found, expected, prefix, diffs)
    if diffs:
        raise ConfigMismatchError(diffs)


def _diff(a, b, prefix, out):
    if isinstance(a, dict) and isinstance(b, dict):
        for k in set(a) | set(b):
            _diff(a.get(k), b.get(k), f"{prefix}{k}.", out)
    elif a != b:
        out[prefix.rstrip(".")] = (a, b)

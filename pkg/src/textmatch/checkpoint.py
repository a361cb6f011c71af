"""Flat binary parameter container plus a human-readable sidecar.

Layout: magic, format version, a JSON header (config plus a table of
name/dtype/shape/offset entries), then the raw little-endian float32
payloads. The sidecar ``<path>.meta`` holds key=value lines with the seed,
step count, dev metrics and the full run config.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TXM1"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict, meta: dict | None = None) -> None:
    path = Path(path)
    entries = []
    offset = 0
    payloads = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "dtype": "<f4", "shape": list(data.shape), "offset": offset})
        payloads.append(data.tobytes())
        offset += len(payloads[-1])
    header = json.dumps({"config": config, "entries": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for chunk in payloads:
            fh.write(chunk)
    lines = []
    for key, value in (meta or {}).items():
        lines.append(f"{key}={value}")
    for key, value in sorted(config.items()):
        lines.append(f"config.{key}={value}")
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        version, header_len = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=entry["dtype"], count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return header["config"], arrays


def read_meta(path) -> dict[str, str]:
    meta = {}
    for line in Path(str(path) + ".meta").read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key] = value
    return meta

"""Little-endian checkpoint container: header (magic, version, config blob)
followed by named float32 arrays with explicit shapes."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"STEMTTCK"
VERSION = 1


def save_checkpoint(path, config_text: str, arrays: dict[str, np.ndarray]) -> None:
    blob = config_text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    off = 8
    version, cfg_len = struct.unpack_from("<II", data, off)
    off += 8
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config_text = data[off : off + cfg_len].decode("utf-8")
    off += cfg_len
    (n_arrays,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        arrays[name] = arr.copy()
    return config_text, arrays

"""Binary file formats: netpbm images (P5/P6) and the "SCTL" tensor checkpoint."""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"SCTL"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


# -- netpbm ----------------------------------------------------------------------
def _to_bytes(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Write an H×W×3 image (uint8, or float in [0, 1]) as binary P6."""
    arr = _to_bytes(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM needs H×W×3, got {arr.shape}")
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(arr).tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    """Write an H×W map (uint8, bool, or float in [0, 1]) as binary P5."""
    arr = np.asarray(img)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    arr = _to_bytes(arr)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs H×W, got {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(arr).tobytes())


def _read_netpbm(path) -> tuple[bytes, int, int, bytes]:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit netpbm is supported")
    return magic, w, h, raw[pos:]


def read_ppm(path) -> np.ndarray:
    """Read a P6 file into an H×W×3 uint8 array."""
    magic, w, h, body = _read_netpbm(path)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    return np.frombuffer(body[: w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into an H×W uint8 array."""
    magic, w, h, body = _read_netpbm(path)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).copy()


# -- checkpoints -------------------------------------------------------------------
def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Serialize named f32 arrays; names are written in sorted order."""
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: rank {arr.ndim} too large")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(bytes(out))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 12
    result: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        result[name] = arr.astype(np.float32)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return result


# -- JSON lines ------------------------------------------------------------------------
def write_jsonl(path, records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]

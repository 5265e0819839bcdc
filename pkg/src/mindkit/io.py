"""On-disk formats: TNSR tensors, PPM images, weight bundles, content hashes.

TNSR layout::

    b"TNSR" | u8 version (=1) | u8 rank | rank x u32 extents (LE) | f32 payload (LE, row-major)
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from mindkit.errors import IOFailure

MAGIC = b"TNSR"
VERSION = 1


def tnsr_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise IOFailure("rank too large for TNSR")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tnsr_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise IOFailure("not a TNSR payload (bad magic)")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise IOFailure(f"unsupported TNSR version {version}")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    off = 6 + 4 * rank
    n = int(np.prod(shape)) if rank else 1
    if len(buf) - off != 4 * n:
        raise IOFailure("TNSR payload length does not match extents")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape)


def write_tnsr(path: str | Path, arr: np.ndarray) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(tnsr_bytes(arr))
    except OSError as exc:
        raise IOFailure(str(exc)) from exc


def read_tnsr(path: str | Path) -> np.ndarray:
    try:
        return tnsr_from_bytes(Path(path).read_bytes())
    except OSError as exc:
        raise IOFailure(str(exc)) from exc


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary P6, 8-bit; ``image`` is HxWx3 in [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise IOFailure(f"PPM needs HxWx3, got {img.shape}")
    h, w, _ = img.shape
    px = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes())
    except OSError as exc:
        raise IOFailure(str(exc)) from exc


def read_ppm(path: str | Path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise IOFailure("only 8-bit P6 PPM is supported")
    w, h = int(fields[1]), int(fields[2])
    px = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return (px.reshape(h, w, 3).astype(np.float32) / 255.0)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit so in-memory images equal what PPM stores."""
    return (np.clip(np.rint(np.asarray(image) * 255.0), 0, 255) / 255.0).astype(np.float32)


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def sha256_bytes(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def hash_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode("utf-8"))
        h.update(tnsr_bytes(arrays[k]))
    return h.hexdigest()


def save_bundle(directory: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> str:
    """Write ``<dir>/manifest.json`` plus one TNSR per tensor; returns the bundle hash."""
    directory = Path(directory)
    names = sorted(tensors)
    manifest = {
        "tensors": {k: f"{k}.tnsr" for k in names},
        "shapes": {k: list(np.shape(tensors[k])) for k in names},
        "meta": dict(meta or {}),
        "hash": hash_arrays(tensors),
    }
    for k in names:
        write_tnsr(directory / f"{k}.tnsr", tensors[k])
    try:
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    return manifest["hash"]


def load_bundle(directory: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any], str]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise IOFailure(f"cannot read bundle manifest in {directory}: {exc}") from exc
    tensors = {k: read_tnsr(directory / f) for k, f in manifest["tensors"].items()}
    return tensors, manifest.get("meta", {}), manifest["hash"]

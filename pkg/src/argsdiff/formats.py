"""On-disk formats: HSIC cube files, parameter checkpoints, PNG export, loss traces.

Cube file layout (all little-endian)::

    b"HSIC" | u16 version=1 | u32 H | u32 W | u32 bands | f32 payload | u32 crc32(payload)

The payload is row-major with the band index fastest.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

CUBE_MAGIC = b"HSIC"
CUBE_VERSION = 1
_CUBE_HEADER = struct.Struct("<4sHIII")

CKPT_MAGIC = b"HSCK"
CKPT_VERSION = 1


class CubeFormatError(ValueError):
    pass


class BadMagicError(CubeFormatError):
    pass


class TruncatedFileError(CubeFormatError):
    pass


class ChecksumError(CubeFormatError):
    pass


def _atomic_write(path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def cube_to_bytes(cube: np.ndarray) -> bytes:
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise CubeFormatError(f"cube must be 3-D, got shape {cube.shape}")
    payload = np.ascontiguousarray(cube, dtype="<f4").tobytes()
    header = _CUBE_HEADER.pack(CUBE_MAGIC, CUBE_VERSION, *cube.shape)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def cube_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < _CUBE_HEADER.size:
        raise TruncatedFileError("file shorter than the cube header")
    magic, version, h, w, b = _CUBE_HEADER.unpack_from(blob)
    if magic != CUBE_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != CUBE_VERSION:
        raise CubeFormatError(f"unsupported version {version}")
    n = 4 * h * w * b
    start = _CUBE_HEADER.size
    if len(blob) < start + n + 4:
        raise TruncatedFileError(f"expected {start + n + 4} bytes, got {len(blob)}")
    payload = blob[start:start + n]
    (crc,) = struct.unpack_from("<I", blob, start + n)
    if zlib.crc32(payload) != crc:
        raise ChecksumError("payload CRC32 mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, b).astype(np.float64)


def write_cube(cube: np.ndarray, path) -> None:
    _atomic_write(path, cube_to_bytes(cube))


def read_cube(path) -> np.ndarray:
    return cube_from_bytes(Path(path).read_bytes())


def write_checkpoint(state: dict[str, np.ndarray], path) -> None:
    """Named float64 tensors: magic, version, count, then (name, dims, data) entries, CRC32."""
    body = bytearray(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        key = name.encode()
        body += struct.pack("<H", len(key)) + key
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    blob = CKPT_MAGIC + struct.pack("<H", CKPT_VERSION) + bytes(body)
    _atomic_write(path, blob + struct.pack("<I", zlib.crc32(blob)))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 14:
        raise TruncatedFileError("checkpoint too short")
    if blob[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    pos = 6
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) * 8
        out[name] = np.frombuffer(blob[pos:pos + n], dtype="<f8").reshape(shape).copy()
        pos += n
    return out


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    image = image.astype(np.float64)
    if image.size and (np.nanmin(image) < 0.0 or np.nanmax(image) > 1.0 or np.isnan(image).any()):
        raise ValueError("image values must lie in [0, 1]; normalise before export")
    return np.round(image * 255.0).astype(np.uint8)


def export_png(image: np.ndarray, path, bands: tuple[int, int, int] | None = None) -> None:
    """Write an 8-bit grayscale (H, W) or RGB PNG.

    A cube with more than three bands is rendered as pseudo-colour from
    ``bands`` (defaults to three evenly spread bands).
    """
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] != 3 or bands is not None:
        if image.ndim != 3:
            raise ValueError("band selection needs a 3-D cube")
        if bands is None:
            n = image.shape[2]
            bands = (n - 1, n // 2, 0) if n > 1 else (0, 0, 0)
        image = image[:, :, list(bands)]
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim not in (2, 3):
        raise ValueError(f"cannot export image of shape {image.shape}")
    pixels = to_uint8(image)
    mode = "L" if pixels.ndim == 2 else "RGB"
    Image.fromarray(np.ascontiguousarray(pixels), mode=mode).save(path, format="PNG", optimize=False, compress_level=6)


def write_trace(values, path) -> None:
    """Two-column text file: step index, value."""
    lines = [f"{i + 1} {float(v):.17g}" for i, v in enumerate(values)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path) -> np.ndarray:
    data = np.loadtxt(path, ndmin=2)
    return data[:, 1]

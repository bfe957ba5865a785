"""PFM float maps and binary PPM/PGM images, plus atomic text writes."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes


class FormatError(OSError):
    """Malformed or truncated image file; message carries the byte offset."""


_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _header_tokens(buf: bytes, count: int, path) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    for _ in range(count):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise FormatError(f"{path}: malformed header at byte {pos}")
        tokens.append(m.group(2))
        pos = m.end()
    # exactly one whitespace byte separates the header from the payload
    if pos >= len(buf) or buf[pos:pos + 1] not in (b"\n", b" ", b"\r", b"\t"):
        raise FormatError(f"{path}: missing header terminator at byte {pos}")
    return tokens, pos + 1


def write_pfm(path, data: np.ndarray) -> None:
    """Write a [H, W] or [H, W, 3] float map, little endian, rows bottom-to-top."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        kind = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        kind = b"PF"
    else:
        raise ValueError(f"PFM stores [H, W] or [H, W, 3] maps, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("PFM payload must be finite")
    h, w = arr.shape[:2]
    header = kind + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n"
    payload = np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def read_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, off = _header_tokens(buf, 4, path)
    kind = tokens[0]
    if kind not in (b"Pf", b"PF"):
        raise FormatError(f"{path}: bad PFM identifier {kind!r} at byte 0")
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PFM header before byte {off}: {exc}") from None
    if w <= 0 or h <= 0 or scale == 0.0:
        raise FormatError(f"{path}: invalid PFM dimensions/scale before byte {off}")
    channels = 3 if kind == b"PF" else 1
    need = 4 * w * h * channels
    if len(buf) - off < need:
        raise FormatError(f"{path}: truncated payload at byte {len(buf)} (expected {off + need})")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(buf, dtype=dtype, count=w * h * channels, offset=off).astype(np.float64)
    arr = arr.reshape((h, w, channels) if channels == 3 else (h, w))[::-1]
    return np.ascontiguousarray(arr)


def _to_u8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an [H, W, 3] image with values in [0, 1] as binary P6."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM expects [H, W, 3], got {img.shape}")
    h, w = img.shape[:2]
    atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + _to_u8(img).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Write an [H, W] image with values in [0, 1] as binary P5."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM expects [H, W], got {img.shape}")
    h, w = img.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + _to_u8(img).tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, off = _header_tokens(buf, 4, path)
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} identifier, got {tokens[0]!r} at byte 0")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header before byte {off}: {exc}") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit maxval 255 supported, got {maxval} before byte {off}")
    need = w * h * channels
    if len(buf) - off < need:
        raise FormatError(f"{path}: truncated payload at byte {len(buf)} (expected {off + need})")
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).astype(np.float64) / 255.0
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


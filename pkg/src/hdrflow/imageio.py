"""PFM (linear radiance) and binary PPM (gamma-encoded LDR) readers/writers."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError
from .hdr import LdrFrame, RadianceFrame
from .tensor import Tensor


def write_pfm(frame, path, scale: float = 1.0) -> None:
    """3-channel PFM, little-endian (negative scale), rows bottom to top."""
    data = frame.image.data if isinstance(frame, RadianceFrame) else np.asarray(frame)
    if data.ndim != 3 or data.shape[0] != 3:
        raise FormatError(f"PFM writer expects a 3xHxW image, got {data.shape}")
    _, h, w = data.shape
    rows = np.ascontiguousarray(data.transpose(1, 2, 0)[::-1], dtype="<f4")
    header = f"PF\n{w} {h}\n{-abs(scale)}\n".encode("ascii")
    Path(path).write_bytes(header + rows.tobytes())


def _read_token_lines(raw: bytes, count: int, path):
    """Split ``count`` newline-terminated header lines off the front of ``raw``."""
    lines, pos = [], 0
    for _ in range(count):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: truncated header")
        lines.append(raw[pos:end].decode("ascii", errors="replace").strip())
        pos = end + 1
    return lines, pos


def read_pfm(path) -> RadianceFrame:
    raw = Path(path).read_bytes()
    (tag, dims, scale_s), pos = _read_token_lines(raw, 3, path)
    if tag != "PF":
        raise FormatError(f"{path}: unsupported PFM type {tag!r} (only 3-channel 'PF')")
    try:
        w, h = (int(v) for v in dims.split())
        scale = float(scale_s)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PFM header") from exc
    if w <= 0 or h <= 0 or scale == 0:
        raise FormatError(f"{path}: invalid PFM dimensions/scale")
    dtype = "<f4" if scale < 0 else ">f4"
    n = 3 * w * h
    if len(raw) - pos < 4 * n:
        raise FormatError(f"{path}: truncated PFM payload")
    rows = np.frombuffer(raw, dtype=dtype, count=n, offset=pos).reshape(h, w, 3)
    image = rows[::-1].transpose(2, 0, 1).astype(np.float32)
    return RadianceFrame(Tensor(image))


# ----------------------------------------------------------------------
# PPM (P6)
# ----------------------------------------------------------------------

def write_ppm(frame, path, bits: int = 8) -> None:
    """Quantise [0, 1] values to 8- or 16-bit binary P6 (big-endian samples)."""
    data = frame.image.data if isinstance(frame, LdrFrame) else np.asarray(frame)
    if bits not in (8, 16):
        raise FormatError(f"unsupported PPM bit depth {bits}")
    if data.ndim != 3 or data.shape[0] != 3:
        raise FormatError(f"PPM writer expects a 3xHxW image, got {data.shape}")
    maxval = 255 if bits == 8 else 65535
    _, h, w = data.shape
    q = np.rint(np.clip(data.astype(np.float64), 0.0, 1.0) * maxval)
    q = q.transpose(1, 2, 0).astype(">u2" if bits == 16 else "u1")
    Path(path).write_bytes(f"P6\n{w} {h}\n{maxval}\n".encode("ascii") + q.tobytes())


def _ppm_header(raw: bytes, path):
    """Parse 'P6 w h maxval' with optional comments; return fields and payload offset."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise FormatError(f"{path}: truncated PPM header")
        if raw[pos:pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if pos >= len(raw) and len(tokens) == 4:
        raise FormatError(f"{path}: truncated PPM header")
    return tokens, pos + 1  # exactly one whitespace byte after maxval


def read_ppm(path, exposure: float = 1.0, frame_index: int = 0) -> LdrFrame:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise FormatError(f"{path}: unsupported image format {raw[:2]!r} (only binary P6)")
    tokens, pos = _ppm_header(raw, path)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PPM header") from exc
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid PPM dimensions {w}x{h}")
    if maxval not in (255, 65535):
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    dtype = np.dtype("u1") if maxval == 255 else np.dtype(">u2")
    n = 3 * w * h
    if len(raw) - pos < n * dtype.itemsize:
        raise FormatError(f"{path}: truncated PPM payload")
    q = np.frombuffer(raw, dtype=dtype, count=n, offset=pos).reshape(h, w, 3)
    image = (q.transpose(2, 0, 1).astype(np.float32) / np.float32(maxval))
    return LdrFrame(Tensor(image), exposure, frame_index)

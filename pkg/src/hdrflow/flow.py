"""Flow fields: backward warping, rescaling, .flo I/O and colour-wheel rendering."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor

FLO_MAGIC = b"PIEH"  # float32 202021.25, little-endian


@dataclass
class FlowField:
    """Per-pixel displacement (u, v) from a reference frame into a neighbour."""

    flow: Tensor
    source_index: int = 0
    target_index: int = 0

    def __post_init__(self):
        if not isinstance(self.flow, Tensor):
            self.flow = Tensor(self.flow)
        if self.flow.ndim != 3 or self.flow.shape[0] != 2:
            raise ShapeError(f"flow must be 2xHxW, got {self.flow.shape}")
        if not np.isfinite(self.flow.data).all():
            raise ConfigError("flow contains non-finite values")

    @property
    def shape(self):
        return self.flow.shape

    @property
    def u(self) -> np.ndarray:
        return self.flow.data[0]

    @property
    def v(self) -> np.ndarray:
        return self.flow.data[1]


def _as_flow_tensor(flow) -> Tensor:
    return flow.flow if isinstance(flow, FlowField) else T.as_tensor(flow)


def warp(image, flow) -> Tensor:
    """Backward-warp ``image`` (CxHxW or NxCxHxW) by ``flow``.

    out(p) = bilinear sample of image at p + flow(p). Sample coordinates are
    clamped to the frame, i.e. clamp-to-edge borders. Differentiable with
    respect to both the image and the flow.
    """
    image = T.as_tensor(image)
    flow = _as_flow_tensor(flow)
    batched = image.ndim == 4
    img = image.data if batched else image.data[None]
    fl = flow.data if flow.ndim == 4 else flow.data[None]
    n, c, h, w = img.shape
    if fl.shape != (n, 2, h, w):
        raise ShapeError(f"warp: flow shape {flow.shape} does not match image {image.shape}")
    dtype = img.dtype
    gy, gx = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    sx_raw = gx + fl[:, 0]
    sy_raw = gy + fl[:, 1]
    sx = np.clip(sx_raw, 0, w - 1)
    sy = np.clip(sy_raw, 0, h - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (sx - x0).astype(dtype)[:, None]
    wy = (sy - y0).astype(dtype)[:, None]
    bidx = np.arange(n)[:, None, None, None]
    cidx = np.arange(c)[None, :, None, None]

    def gather(yy, xx):
        return img[bidx, cidx, yy[:, None], xx[:, None]]

    v00, v01 = gather(y0, x0), gather(y0, x1)
    v10, v11 = gather(y1, x0), gather(y1, x1)
    top = (1 - wx) * v00 + wx * v01
    bot = (1 - wx) * v10 + wx * v11
    out = (1 - wy) * top + wy * bot

    def grad_fn(g):
        g = g if batched else g[None]
        gimg = gflow = None
        if image.requires_grad:
            base = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
            acc = np.zeros(n * c * h * w, dtype=np.float64)
            for yy, xx, wt in ((y0, x0, (1 - wy) * (1 - wx)), (y0, x1, (1 - wy) * wx),
                               (y1, x0, wy * (1 - wx)), (y1, x1, wy * wx)):
                idx = (base + (yy * w + xx)[:, None]).reshape(-1)
                acc += np.bincount(idx, weights=(g * wt).reshape(-1), minlength=acc.size)
            gimg = acc.astype(dtype).reshape(n, c, h, w)
            if not batched:
                gimg = gimg[0]
        if flow.requires_grad:
            inside_x = ((sx_raw >= 0) & (sx_raw <= w - 1))[:, None]
            inside_y = ((sy_raw >= 0) & (sy_raw <= h - 1))[:, None]
            dx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10)) * inside_x
            dy = (bot - top) * inside_y
            gflow = np.stack([(g * dx).sum(axis=1), (g * dy).sum(axis=1)], axis=1)
            if flow.ndim == 3:
                gflow = gflow[0]
        return gimg, gflow

    return T._node(out if batched else out[0], (image, flow), grad_fn, "warp")


def upsample_flow(flow, factor: int) -> FlowField:
    """Bilinear upsampling by an integer factor; displacements scale with it."""
    if int(factor) != factor or factor < 1:
        raise ConfigError(f"upsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    src = flow if isinstance(flow, FlowField) else FlowField(flow)
    if factor == 1:
        return FlowField(src.flow, src.source_index, src.target_index)
    t = src.flow
    up = T.bilinear_resize(t, t.shape[-2] * factor, t.shape[-1] * factor) * float(factor)
    return FlowField(up, src.source_index, src.target_index)


def upsample_flow_tensor(flow: Tensor, factor: int) -> Tensor:
    """Same as :func:`upsample_flow` for raw (N)x2xHxW tensors."""
    return T.bilinear_resize(flow, flow.shape[-2] * factor, flow.shape[-1] * factor) * float(factor)


# ----------------------------------------------------------------------
# Middlebury .flo
# ----------------------------------------------------------------------

def write_flo(flow, path) -> None:
    data = _as_flow_tensor(flow).data
    _, h, w = data.shape
    payload = np.ascontiguousarray(data.transpose(1, 2, 0), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(payload.tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated .flo header")
    if raw[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {raw[:4]!r}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: non-positive dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated .flo payload ({len(raw)} < {expected} bytes)")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes")
    uv = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField(Tensor(uv.transpose(2, 0, 1).astype(np.float32)))


# ----------------------------------------------------------------------
# visualisation
# ----------------------------------------------------------------------

def make_color_wheel() -> np.ndarray:
    """The 55-entry Middlebury colour wheel, RGB in [0, 255]."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[col:col + ry, 0] = 255
    wheel[col:col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel


def flow_to_rgb(flow, percentile: float = 99.0) -> Tensor:
    """Render a flow with the colour wheel: hue from direction, saturation
    from magnitude relative to its 99th percentile. Returns 3xHxW in [0, 1]."""
    data = _as_flow_tensor(flow).data.astype(np.float64)
    u, v = data[0], data[1]
    mag = np.sqrt(u * u + v * v)
    scale = np.percentile(mag, percentile)
    eps = 1e-12
    rad = mag / max(scale, eps)
    wheel = make_color_wheel() / 255.0
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    r = rad[..., None]
    col = np.where(r <= 1, 1 - r * (1 - col), col * 0.75)
    return Tensor(col.transpose(2, 0, 1).astype(np.float32))

"""Flow network (feature/image pyramids, multi-size large kernel, decoder,
flow head), fusion U-Net, weighted HDR merge and the HDRW weight container.

Forward passes read layer widths from the weight tensors themselves, so the
same code runs full-width and channel-reduced networks.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .flow import FlowField, upsample_flow_tensor
from .hdr import RadianceFrame
from .tensor import ConvSpec, Tensor

HDRW_MAGIC = b"HDRW"
HDRW_VERSION = 1
FUSION_EPS = 1e-6


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------

def _scale(channels, divisor):
    return tuple(max(1, c // divisor) for c in channels)


@dataclass(frozen=True)
class FlowNetConfig:
    in_channels: int = 9
    pyramid_channels: Tuple[int, ...] = (32, 64, 128, 256)
    mlk_kernels: Tuple[int, ...] = (7, 9, 11)
    decoder_channels: Tuple[int, ...] = (128, 64)
    head_channels: Tuple[int, ...] = (64, 32)
    out_channels: int = 4

    def __post_init__(self):
        if len(self.pyramid_channels) != 4 or len(self.decoder_channels) != 2:
            raise ConfigError("flow net needs 4 pyramid levels and 2 decoder blocks")
        if self.out_channels != 4:
            raise ConfigError("flow head must emit exactly two 2-channel flows")

    def scaled(self, divisor: int) -> "FlowNetConfig":
        return replace(
            self,
            pyramid_channels=_scale(self.pyramid_channels, divisor),
            decoder_channels=_scale(self.decoder_channels, divisor),
            head_channels=_scale(self.head_channels, divisor),
        )


@dataclass(frozen=True)
class FusionNetConfig:
    in_channels: int = 30
    down_channels: Tuple[int, ...] = (32, 64, 128)
    out_weights: int = 5

    def __post_init__(self):
        if self.in_channels != 6 * self.out_weights:
            raise ConfigError(
                f"fusion input must carry 6 channels per candidate: {self.in_channels} != 6*{self.out_weights}"
            )
        if len(self.down_channels) != 3:
            raise ConfigError("fusion U-Net has exactly three resolutions")

    @classmethod
    def for_exposures(cls, n_exposures: int, divisor: int = 1) -> "FusionNetConfig":
        k = {2: 5, 3: 9}.get(n_exposures)
        if k is None:
            raise ConfigError(f"unsupported exposure count {n_exposures}")
        return cls(6 * k, _scale((32, 64, 128), divisor), k)

    def scaled(self, divisor: int) -> "FusionNetConfig":
        return replace(self, down_channels=_scale(self.down_channels, divisor))


@dataclass(frozen=True)
class LayerDef:
    name: str
    shape: Tuple[int, ...]
    fan_in: int


def _conv_def(name, cout, cin, k, depthwise=False) -> List[LayerDef]:
    if depthwise:
        return [LayerDef(name + ".weight", (cout, 1, k, k), k * k),
                LayerDef(name + ".bias", (cout,), k * k)]
    return [LayerDef(name + ".weight", (cout, cin, k, k), cin * k * k),
            LayerDef(name + ".bias", (cout,), cin * k * k)]


def _deconv_def(name, cin, cout, k=4, stride=2) -> List[LayerDef]:
    # each output pixel sees cin * (k/stride)^2 taps
    fan = cin * (k // stride) ** 2
    return [LayerDef(name + ".weight", (cin, cout, k, k), fan),
            LayerDef(name + ".bias", (cout,), fan)]


def flownet_layers(cfg: FlowNetConfig) -> List[LayerDef]:
    p = cfg.pyramid_channels
    d = cfg.decoder_channels
    img = cfg.in_channels
    layers: List[LayerDef] = []
    inputs = (cfg.in_channels, p[0], p[1] + img, p[2] + img)
    for s, (cin, cout) in enumerate(zip(inputs, p)):
        for b in range(2):
            pre = f"enc.s{s}.b{b}"
            c_first = cin if b == 0 else cout
            layers += _conv_def(pre + ".conv1", cout, c_first, 3)
            layers += _conv_def(pre + ".conv2", cout, cout, 3)
            if b == 0:
                layers += _conv_def(pre + ".proj", cout, cin, 1)
    layers += _conv_def("enc.merge", p[3], p[3] + img, 1)
    for k in cfg.mlk_kernels:
        layers += _conv_def(f"mlk.dw{k}", p[3], p[3], k, depthwise=True)
    layers += _conv_def("mlk.merge", p[3], p[3] * len(cfg.mlk_kernels), 1)
    skips = (p[2] + img, p[1] + img)
    prev = p[3]
    for i, (c, skip) in enumerate(zip(d, skips)):
        layers += _deconv_def(f"dec.up{i}.deconv", prev, c)
        layers += _conv_def(f"dec.up{i}.squeeze", c, c + skip, 1)
        layers += _conv_def(f"dec.up{i}.conv", c, c, 3)
        prev = c
    widths = tuple(cfg.head_channels) + (cfg.out_channels,)
    for i, c in enumerate(widths):
        layers += _conv_def(f"head.c{i}", c, prev, 5)
        prev = c
    return layers


def fusionnet_layers(cfg: FusionNetConfig) -> List[LayerDef]:
    c = cfg.down_channels
    layers: List[LayerDef] = []
    prev = cfg.in_channels
    for i, ch in enumerate(c):
        layers += _conv_def(f"down{i}.conv0", ch, prev, 3)
        layers += _conv_def(f"down{i}.conv1", ch, ch, 3)
        prev = ch
    # decoder mirrors the encoder; the last block merges with the raw input
    plan = ((c[2], c[1], c[1]), (c[1], c[0], c[0]), (c[0], c[0], cfg.in_channels))
    for i, (cin, cout, skip) in enumerate(plan):
        layers += _deconv_def(f"up{i}.deconv", cin, cout)
        out = cfg.out_weights if i == 2 else cout
        layers += _conv_def(f"up{i}.conv", out, cout + skip, 3)
    return layers


# ----------------------------------------------------------------------
# weight store and container
# ----------------------------------------------------------------------

class WeightStore:
    """Ordered name -> Tensor mapping."""

    def __init__(self, entries=None, format_version: int = HDRW_VERSION):
        self.entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self.format_version = format_version
        for name, value in (entries or {}).items():
            self[name] = value

    def __getitem__(self, name) -> Tensor:
        try:
            return self.entries[name]
        except KeyError:
            raise ConfigError(f"missing weight tensor {name!r}") from None

    def __setitem__(self, name, value):
        self.entries[name] = value if isinstance(value, Tensor) else Tensor(value)

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def get(self, name, default=None):
        return self.entries.get(name, default)

    def subset(self, prefix: str) -> "WeightStore":
        """View of the entries under ``prefix`` with the prefix stripped
        (tensors are shared, not copied)."""
        view = WeightStore(format_version=self.format_version)
        for name, t in self.entries.items():
            if name.startswith(prefix):
                view.entries[name[len(prefix):]] = t
        return view

    @classmethod
    def combine(cls, parts: Dict[str, "WeightStore"]) -> "WeightStore":
        out = cls()
        for prefix, store in parts.items():
            for name, t in store.items():
                out.entries[prefix + name] = t
        return out

    def copy(self) -> "WeightStore":
        return WeightStore({k: Tensor(v.data.copy()) for k, v in self.entries.items()},
                           self.format_version)

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.entries.values()))

    def equals(self, other: "WeightStore") -> bool:
        if list(self) != list(other):
            return False
        return all(
            self[k].data.shape == other[k].data.shape
            and self[k].data.tobytes() == other[k].data.astype(self[k].dtype).tobytes()
            for k in self
        )


def init_weights(config, seed: int = 0) -> WeightStore:
    """Kaiming-normal weights (std = sqrt(2 / fan_in)) and zero biases."""
    if isinstance(config, FlowNetConfig):
        layers = flownet_layers(config)
    elif isinstance(config, FusionNetConfig):
        layers = fusionnet_layers(config)
    else:
        raise ConfigError(f"unknown network config {config!r}")
    rng = np.random.default_rng(seed)
    store = WeightStore()
    for layer in layers:
        if layer.name.endswith(".bias"):
            store[layer.name] = np.zeros(layer.shape, dtype=np.float32)
        else:
            std = np.sqrt(2.0 / layer.fan_in)
            store[layer.name] = (rng.standard_normal(layer.shape) * std).astype(np.float32)
    return store


def init_model(flow_cfg: FlowNetConfig, fusion_cfg: FusionNetConfig, seed: int = 0) -> WeightStore:
    """Both networks in one store, under ``flow.`` and ``fusion.``."""
    return WeightStore.combine({
        "flow.": init_weights(flow_cfg, seed),
        "fusion.": init_weights(fusion_cfg, seed + 1),
    })


def save_weights(store: WeightStore, path) -> None:
    chunks = [HDRW_MAGIC, struct.pack("<II", HDRW_VERSION, len(store))]
    for name, t in store.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ConfigError(f"tensor name too long: {name[:40]}...")
        dims = t.shape
        if len(dims) > 255:
            raise ConfigError(f"{name}: too many dimensions")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", len(dims)) + struct.pack(f"<{len(dims)}I", *dims))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> WeightStore:
    raw = Path(path).read_bytes()

    def need(pos, n, what):
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated while reading {what}")

    need(0, 12, "header")
    if raw[:4] != HDRW_MAGIC:
        raise FormatError(f"{path}: bad weight-file magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != HDRW_VERSION:
        raise FormatError(f"{path}: unsupported weight-file version {version}")
    pos = 12
    store = WeightStore(format_version=version)
    for _ in range(count):
        need(pos, 2, "name length")
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        need(pos, nlen + 1, "name")
        try:
            name = raw[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: tensor name is not UTF-8") from exc
        pos += nlen
        ndim = raw[pos]
        pos += 1
        need(pos, 4 * ndim, "dims")
        dims = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        if any(d < 1 for d in dims):
            raise FormatError(f"{path}: tensor {name!r} has an empty dimension")
        size = int(np.prod(dims, dtype=np.int64))
        need(pos, 4 * size, f"payload of {name!r}")
        data = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        if name in store:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        store[name] = data.astype(np.float32)
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return store


# ----------------------------------------------------------------------
# layer helpers
# ----------------------------------------------------------------------

def _conv(x, ws, name, stride=1, act=True, depthwise=False):
    w = ws[name + ".weight"]
    b = ws.get(name + ".bias")
    if w.ndim != 4:
        raise ShapeError(f"{name}: weight must be 4-D, got {w.shape}")
    o, c, kh, kw = w.shape
    spec = ConvSpec(o if depthwise else c, o, kh, kw, stride, None, depthwise)
    y = T.conv2d(x, spec, w, b)
    return T.relu(y) if act else y


def _deconv(x, ws, name, act=True):
    w = ws[name + ".weight"]
    b = ws.get(name + ".bias")
    if w.ndim != 4:
        raise ShapeError(f"{name}: weight must be 4-D, got {w.shape}")
    cin, cout, kh, kw = w.shape
    y = T.deconv2d(x, ConvSpec(cin, cout, kh, kw, 2, 1), w, b)
    return T.relu(y) if act else y


def _resblock(x, ws, name, stride):
    y = _conv(x, ws, name + ".conv1", stride)
    y = _conv(y, ws, name + ".conv2", act=False)
    skip = _conv(x, ws, name + ".proj", stride, act=False) if name + ".proj.weight" in ws else x
    return T.relu(y + skip)


def _batch(x):
    x = T.as_tensor(x)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected CHW or NCHW input, got {x.shape}")
    return x, False


# ----------------------------------------------------------------------
# flow network
# ----------------------------------------------------------------------

def mlk_block(z, weights: WeightStore, prefix: str = "mlk.") -> Tensor:
    """Parallel depthwise large kernels, 1x1 merge, residual add."""
    z = T.as_tensor(z)
    ws = weights.subset(prefix) if prefix else weights
    merge = ws["merge.weight"]
    if z.shape[-3] != merge.shape[0]:
        raise ShapeError(f"mlk_block: input has {z.shape[-3]} channels, merge expects {merge.shape[0]}")
    kernels = sorted(int(n[2:-len(".weight")]) for n in ws if n.startswith("dw") and n.endswith(".weight"))
    if not kernels:
        raise ConfigError("mlk_block: no depthwise branches in weights")
    branches = [_conv(z, ws, f"dw{k}", act=False, depthwise=True) for k in kernels]
    merged = _conv(T.concat_channels(branches), ws, "merge", act=False)
    return z + merged


def flownet_tensor(x, weights: WeightStore, features: Optional[dict] = None) -> Tensor:
    """NCHW (or CHW) 9-channel input -> full-resolution 4-channel flow tensor.

    Channels 0-1 are the flow to the first input frame, 2-3 to the third.
    If ``features`` is a dict it receives the intermediate activations.
    """
    x, squeeze = _batch(x)
    n, c, h, w = x.shape
    if h % 16 or w % 16:
        raise ShapeError(f"flow network needs H, W divisible by 16, got {h}x{w}")
    first = weights["enc.s0.b0.conv1.weight"]
    if c != first.shape[1]:
        raise ShapeError(f"flow network expects {first.shape[1]} input channels, got {c}")

    pyramid = [x]
    for _ in range(4):
        pyramid.append(T.avg_pool2(pyramid[-1]))
    feats = {}
    f = x
    for s in range(4):
        f = _resblock(f, weights, f"enc.s{s}.b0", 2)
        f = _resblock(f, weights, f"enc.s{s}.b1", 1)
        feats[f"feature_{2 ** (s + 1)}"] = f
        if s >= 1:
            f = T.concat_channels([f, pyramid[s + 1]])
            feats[f"concat_{2 ** (s + 1)}"] = f
    z_e = _conv(f, weights, "enc.merge")
    feats["z_e"] = z_e
    z = mlk_block(z_e, weights)
    feats["z_mlk"] = z
    u = z
    for i, skip in enumerate(("concat_8", "concat_4")):
        u = _deconv(u, weights, f"dec.up{i}.deconv")
        u = T.concat_channels([u, feats[skip]])
        u = _conv(u, weights, f"dec.up{i}.squeeze")
        u = _conv(u, weights, f"dec.up{i}.conv")
        feats[f"decoder_{8 // (i + 1)}"] = u
    i = 0
    while f"head.c{i + 1}.weight" in weights:
        u = _conv(u, weights, f"head.c{i}", act=True)
        i += 1
    quarter = _conv(u, weights, f"head.c{i}", act=False)
    if quarter.shape[1] != 4:
        raise ShapeError(f"flow head must output 4 channels, got {quarter.shape[1]}")
    feats["flow_quarter"] = quarter
    flows = upsample_flow_tensor(quarter, 4)
    if features is not None:
        features.update(feats)
    return T.reshape(flows, flows.shape[1:]) if squeeze else flows


def flownet_forward(frames, weights: WeightStore, features: Optional[dict] = None
                    ) -> Tuple[FlowField, FlowField]:
    """Bidirectional flows (to frame 0, to frame 2) for one 9xHxW stack."""
    frames = T.as_tensor(frames)
    if frames.ndim != 3:
        raise ShapeError(f"flownet_forward takes a 9xHxW stack, got {frames.shape}")
    out = flownet_tensor(frames, weights, features)
    return FlowField(out[0:2]), FlowField(out[2:4])


# ----------------------------------------------------------------------
# fusion network
# ----------------------------------------------------------------------

def fusionnet_forward(stack, weights: WeightStore) -> Tensor:
    """Per-pixel fusion weights in (0, 1), one map per candidate."""
    x, squeeze = _batch(stack)
    n, c, h, w = x.shape
    if h % 8 or w % 8:
        raise ShapeError(f"fusion network needs H, W divisible by 8, got {h}x{w}")
    expected = weights["down0.conv0.weight"].shape[1]
    if c != expected:
        raise ShapeError(f"fusion network expects {expected} input channels, got {c}")
    skips = [x]
    f = x
    for i in range(3):
        f = _conv(f, weights, f"down{i}.conv0", stride=2)
        f = _conv(f, weights, f"down{i}.conv1")
        skips.append(f)
    for i in range(3):
        f = _deconv(f, weights, f"up{i}.deconv")
        f = T.concat_channels([f, skips[2 - i]])
        f = _conv(f, weights, f"up{i}.conv", act=(i < 2))
    out = T.sigmoid(f)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def fuse_hdr(weight_maps, candidates: Sequence, eps: float = FUSION_EPS) -> RadianceFrame:
    """Per-pixel weighted mean of K linear candidates.

    H = sum_j (w_j + eps/K) I_j / (sum_j w_j + eps). The guard is spread over
    the candidates, so the result stays a convex combination even where all
    weights vanish; accumulation runs in float64.
    """
    wm = T.as_tensor(weight_maps)
    imgs = [c.image if isinstance(c, RadianceFrame) else T.as_tensor(c) for c in candidates]
    k = len(imgs)
    if wm.ndim != 3 or wm.shape[0] != k:
        raise ShapeError(f"fuse_hdr: {wm.shape[0] if wm.ndim == 3 else wm.shape} weight maps for {k} candidates")
    shape = imgs[0].shape
    if any(im.shape != shape for im in imgs) or shape[-2:] != wm.shape[-2:]:
        raise ShapeError("fuse_hdr: candidates and weight maps must share spatial dims")
    dtype = imgs[0].dtype
    stack = np.stack([im.data for im in imgs]).astype(np.float64)  # K,C,H,W
    a = wm.data.astype(np.float64)[:, None] + eps / k  # K,1,H,W
    total = a.sum(axis=0)
    out64 = (a * stack).sum(axis=0) / total

    def grad_fn(g):
        g64 = g.astype(np.float64)
        gw = ((stack - out64[None]) * g64[None]).sum(axis=1) / total
        gi = a * g64[None] / total[None]
        return (gw.astype(wm.dtype),) + tuple(gi[j].astype(imgs[j].dtype) for j in range(k))

    fused = T._node(out64.astype(dtype), (wm, *imgs), grad_fn, "fuse_hdr")
    return RadianceFrame(fused)

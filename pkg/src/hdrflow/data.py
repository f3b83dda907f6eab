"""Alternating-exposure data synthesis, augmentation, manifests and samples.

Manifest format (plain text, one record per frame, whitespace separated)::

    HDRFLOW-MANIFEST 1
    white_point <float>                       # optional
    frame <index> <ldr> <exposure> <hdr> <flow_bwd> <flow_fwd>

``flow_bwd`` is the reference->previous flow, ``flow_fwd`` the
reference->next flow (.flo); ``-`` marks an absent field. Relative paths are
resolved against the manifest's directory. Windows are formed from
consecutive records.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .flow import FlowField, read_flo
from .hdr import GAMMA, ExposureSchedule, LdrFrame, RadianceFrame, linear_to_ldr
from .imageio import read_pfm, read_ppm
from .pipeline import SequenceWindow
from .tensor import Tensor

MANIFEST_HEADER = "HDRFLOW-MANIFEST 1"


@dataclass
class TrainingSample:
    ldr_window: SequenceWindow
    gt_hdr: List[RadianceFrame]
    gt_flows: Optional[List[FlowField]] = None
    source_tag: str = "real"

    def __post_init__(self):
        if self.source_tag not in ("real", "synthetic"):
            raise ConfigError(f"unknown source tag {self.source_tag!r}")
        if self.gt_flows is not None and self.source_tag != "synthetic":
            raise ConfigError("ground-truth flows are only valid on synthetic samples")
        if len(self.gt_hdr) != len(self.ldr_window.frames):
            raise ShapeError("one GT HDR frame per LDR frame is required")

    @property
    def has_flow_gt(self) -> bool:
        return self.gt_flows is not None


# ----------------------------------------------------------------------
# synthesis
# ----------------------------------------------------------------------

def _quantize(img: np.ndarray, bits: Optional[int]) -> np.ndarray:
    if bits is None:
        return img
    levels = float(2 ** bits - 1)
    return (np.rint(img.astype(np.float64) * levels) / levels).astype(img.dtype)


def synthesize_frames(hdr_frames: Sequence[RadianceFrame], schedule: ExposureSchedule,
                      gamma: Optional[float] = None, phase: int = 0,
                      quantize_bits: Optional[int] = None) -> List[LdrFrame]:
    """L_t = clip((H_t * e_t)^(1/gamma)) with e_t cycling through the schedule."""
    if not hdr_frames:
        raise ConfigError("no HDR frames to synthesize from")
    gamma = schedule.gamma if gamma is None else gamma
    out = []
    for t, h in enumerate(hdr_frames):
        ldr = linear_to_ldr(h, schedule.exposure_at(t, phase), gamma, frame_index=t)
        if quantize_bits is not None:
            ldr = LdrFrame(Tensor(_quantize(ldr.image.data, quantize_bits)), ldr.exposure, t)
        out.append(ldr)
    return out


def synthesize_window(hdr_frames: Sequence[RadianceFrame], schedule: ExposureSchedule,
                      gamma: Optional[float] = None, phase: int = 0,
                      quantize_bits: Optional[int] = None) -> SequenceWindow:
    if len(hdr_frames) != schedule.window_length:
        raise ConfigError(
            f"a {len(schedule.pattern)}-exposure window needs {schedule.window_length} frames, got {len(hdr_frames)}"
        )
    frames = synthesize_frames(hdr_frames, schedule, gamma, phase, quantize_bits)
    sched = schedule if gamma is None else ExposureSchedule(schedule.pattern, gamma)
    return SequenceWindow(frames, sched)


# ----------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class GeometricDraw:
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0  # clockwise quarter turns
    crop_y: int = 0
    crop_x: int = 0
    crop: Optional[int] = None


def _transform_image(a: np.ndarray, d: GeometricDraw) -> np.ndarray:
    if d.hflip:
        a = a[..., ::-1]
    if d.vflip:
        a = a[..., ::-1, :]
    if d.rot90 % 4:
        a = np.rot90(a, k=-(d.rot90 % 4), axes=(-2, -1))
    if d.crop is not None:
        a = a[..., d.crop_y:d.crop_y + d.crop, d.crop_x:d.crop_x + d.crop]
    return np.ascontiguousarray(a)


def _transform_flow(f: np.ndarray, d: GeometricDraw) -> np.ndarray:
    u, v = f[0], f[1]
    if d.hflip:
        u = -u
    if d.vflip:
        v = -v
    for _ in range(d.rot90 % 4):
        # clockwise turn: (u, v) -> (-v, u)
        u, v = -v, u
    return _transform_image(np.stack([u, v]), d)


def apply_geometry(sample: TrainingSample, draw: GeometricDraw) -> TrainingSample:
    win = sample.ldr_window
    frames = [LdrFrame(Tensor(_transform_image(f.image.data, draw)), f.exposure, f.frame_index)
              for f in win.frames]
    hdr = [RadianceFrame(Tensor(_transform_image(h.image.data, draw)), h.white_point)
           for h in sample.gt_hdr]
    flows = None
    if sample.gt_flows is not None:
        flows = [FlowField(Tensor(_transform_flow(f.flow.data, draw)), f.source_index, f.target_index)
                 for f in sample.gt_flows]
    return TrainingSample(SequenceWindow(frames, win.schedule), hdr, flows, sample.source_tag)


def augment(sample: TrainingSample, rng_seed: int, crop: int = 256) -> TrainingSample:
    """Random flips, quarter-turn rotation and a square crop, applied jointly
    to LDR frames, HDR frames and flows (flow vectors are re-oriented)."""
    h, w = sample.ldr_window.reference.shape[-2:]
    if h < crop or w < crop:
        raise ShapeError(f"frames {h}x{w} are smaller than the {crop}x{crop} crop")
    rng = np.random.default_rng(rng_seed)
    hflip, vflip = bool(rng.integers(2)), bool(rng.integers(2))
    rot = int(rng.integers(4))
    # a quarter turn swaps the axes before cropping
    hh, ww = (w, h) if rot % 2 else (h, w)
    draw = GeometricDraw(hflip, vflip, rot, int(rng.integers(hh - crop + 1)),
                         int(rng.integers(ww - crop + 1)), crop)
    return apply_geometry(sample, draw)


# ----------------------------------------------------------------------
# constructed scenes
# ----------------------------------------------------------------------

def _blur(a: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(3 * sigma))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-(x ** 2) / (2 * sigma ** 2))
    k /= k.sum()
    p = np.pad(a, ((radius, radius), (radius, radius)), mode="wrap")
    p = np.lib.stride_tricks.sliding_window_view(p, k.size, axis=0) @ k
    return np.lib.stride_tricks.sliding_window_view(p, k.size, axis=1) @ k


def random_radiance_canvas(h: int, w: int, seed: int = 0, low: float = 0.003,
                           sigma: float = 3.0) -> np.ndarray:
    """Smooth, textured 3xHxW radiance in [low, 1], log-uniformly spread."""
    rng = np.random.default_rng(seed)
    base = _blur(rng.standard_normal((h, w)), sigma)
    base += 0.5 * _blur(rng.standard_normal((h, w)), sigma * 3)
    base = (base - base.min()) / (base.max() - base.min())
    tint = 1.0 + 0.15 * np.stack([_blur(rng.standard_normal((h, w)), sigma * 2) for _ in range(3)])
    logr = np.log(low) * (1.0 - base)
    rad = np.exp(logr)[None] * tint
    return np.clip(rad / rad.max(), low, 1.0).astype(np.float32)


def make_translation_sample(size: int = 64, shift: Tuple[int, int] = (2, 1),
                            schedule: Optional[ExposureSchedule] = None, seed: int = 0,
                            phase: int = 0, quantize_bits: Optional[int] = None) -> TrainingSample:
    """A window whose neighbours are integer translations of the reference.

    With ``shift = (dx, dy)`` the GT flows are F(t->t-k) = k*(dx, dy) and
    F(t->t+k) = -k*(dx, dy), so warping each neighbour by its GT flow
    reproduces the reference exactly away from the borders.
    """
    schedule = schedule or ExposureSchedule.two_exposure()
    n = schedule.window_length
    half = n // 2
    dx, dy = int(shift[0]), int(shift[1])
    margin = half * max(abs(dx), abs(dy)) + 1
    canvas = random_radiance_canvas(size + 2 * margin, size + 2 * margin, seed)
    hdr, flows = [], []
    for k in range(-half, half + 1):
        # frame t+k at p shows canvas at p + m + k*(dy, dx)
        oy, ox = margin + k * dy, margin + k * dx
        hdr.append(canvas[:, oy:oy + size, ox:ox + size])
        if k != 0:
            f = np.empty((2, size, size), np.float32)
            f[0], f[1] = -k * dx, -k * dy
            flows.append(FlowField(Tensor(f), half, half + k))
    wp = float(hdr[half].max())
    frames = [RadianceFrame(Tensor(np.ascontiguousarray(h)), wp) for h in hdr]
    window = synthesize_window(frames, schedule, phase=phase, quantize_bits=quantize_bits)
    return TrainingSample(window, frames, flows, "synthetic")


# ----------------------------------------------------------------------
# manifests
# ----------------------------------------------------------------------

@dataclass
class ManifestRecord:
    index: int
    ldr: str
    exposure: float
    hdr: Optional[str] = None
    flow_bwd: Optional[str] = None
    flow_fwd: Optional[str] = None


@dataclass
class Manifest:
    records: List[ManifestRecord]
    white_point: Optional[float] = None
    base_dir: Path = field(default_factory=Path)

    def resolve(self, rel: Optional[str]) -> Optional[Path]:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def exposures(self) -> List[float]:
        return [r.exposure for r in self.records]


def _opt(token: str) -> Optional[str]:
    return None if token == "-" else token


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: manifest is not UTF-8 text") from exc
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise FormatError(f"{path}: missing '{MANIFEST_HEADER}' header line")
    manifest = Manifest([], None, path.parent)
    for lineno, line in enumerate(lines[1:], start=2):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        fields = body.split()
        try:
            if fields[0] == "white_point" and len(fields) == 2:
                manifest.white_point = float(fields[1])
                if not manifest.white_point > 0:
                    raise ValueError("white point must be positive")
            elif fields[0] == "frame" and len(fields) == 7:
                manifest.records.append(ManifestRecord(
                    int(fields[1]), fields[2], float(fields[3]),
                    _opt(fields[4]), _opt(fields[5]), _opt(fields[6])))
                if not manifest.records[-1].exposure > 0:
                    raise ValueError("exposure must be positive")
            else:
                raise ValueError(f"unrecognised record {fields[0]!r} with {len(fields)} fields")
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if not manifest.records:
        raise FormatError(f"{path}: manifest lists no frames")
    idx = [r.index for r in manifest.records]
    if idx != sorted(idx) or len(set(idx)) != len(idx):
        raise FormatError(f"{path}: frame indices must be strictly increasing")
    return manifest


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    out = [MANIFEST_HEADER]
    if manifest.white_point is not None:
        out.append(f"white_point {manifest.white_point!r}")
    for r in manifest.records:
        cells = [r.ldr, repr(float(r.exposure)), r.hdr, r.flow_bwd, r.flow_fwd]
        out.append("frame {} {}".format(r.index, " ".join("-" if c is None else str(c) for c in cells)))
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


def relpath(target, start) -> str:
    return Path(os.path.relpath(target, start)).as_posix()


def load_frames(manifest: Manifest) -> List[LdrFrame]:
    return [read_ppm(manifest.resolve(r.ldr), r.exposure, r.index) for r in manifest.records]


def schedule_from_exposures(exposures: Sequence[float], n_exposures: int,
                            gamma: float = GAMMA) -> ExposureSchedule:
    """Recover the cyclic pattern from the first frames of a sequence."""
    if len(exposures) < n_exposures:
        raise ConfigError(f"need at least {n_exposures} frames to infer the exposure cycle")
    pattern = tuple(exposures[:n_exposures])
    schedule = ExposureSchedule(pattern, gamma)
    for t, e in enumerate(exposures):
        if not np.isclose(e, pattern[t % n_exposures], rtol=1e-9):
            raise ConfigError(f"frame {t} exposure {e} breaks the {n_exposures}-exposure cycle {pattern}")
    return schedule


def load_training_sample(manifest: Manifest, reference: int, n_exposures: int = 2,
                         gamma: float = GAMMA) -> TrainingSample:
    """Window around record position ``reference``. GT HDR is divided by the
    manifest white point so it matches the LDR synthesis."""
    schedule = schedule_from_exposures(manifest.exposures(), n_exposures, gamma)
    half = schedule.window_length // 2
    if reference - half < 0 or reference + half >= len(manifest.records):
        raise ConfigError(f"record {reference} has no complete window")
    recs = manifest.records[reference - half: reference + half + 1]
    frames = [read_ppm(manifest.resolve(r.ldr), r.exposure, r.index) for r in recs]
    wp_in = manifest.white_point or 1.0
    hdr_arrays = []
    for r in recs:
        if r.hdr is None:
            raise FormatError(f"frame {r.index} has no HDR ground truth")
        hdr_arrays.append(read_pfm(manifest.resolve(r.hdr)).image.data / np.float32(wp_in))
    wp = float(hdr_arrays[half].max()) or 1.0
    gt = [RadianceFrame(Tensor(a), wp) for a in hdr_arrays]
    ref = recs[half]
    flows, tag = None, "real"
    if ref.flow_bwd is not None and ref.flow_fwd is not None and n_exposures == 2:
        flows = [read_flo(manifest.resolve(ref.flow_bwd)), read_flo(manifest.resolve(ref.flow_fwd))]
        tag = "synthetic"
    return TrainingSample(SequenceWindow(frames, schedule), gt, flows, tag)


def to_float64(sample: TrainingSample) -> TrainingSample:
    """Double-precision copy of a sample (for finite-difference checks)."""
    win = sample.ldr_window
    frames = [LdrFrame(Tensor(f.image.data.astype(np.float64)), f.exposure, f.frame_index)
              for f in win.frames]
    hdr = [RadianceFrame(Tensor(h.image.data.astype(np.float64)), h.white_point) for h in sample.gt_hdr]
    flows = None
    if sample.gt_flows is not None:
        flows = [FlowField(Tensor(f.flow.data.astype(np.float64)), f.source_index, f.target_index)
                 for f in sample.gt_flows]
    return TrainingSample(SequenceWindow(frames, win.schedule), hdr, flows, sample.source_tag)


def export_sample(sample: TrainingSample, directory, bits: int = 16,
                  name: str = "manifest.txt") -> Path:
    """Write a sample as PPM/PFM/.flo files plus a manifest; returns its path.

    GT flows are stored only for the 3-frame case (reference -> previous and
    reference -> next).
    """
    from .flow import write_flo
    from .imageio import write_pfm, write_ppm

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mid = len(sample.gt_hdr) // 2
    records = []
    for pos, (ldr, hdr) in enumerate(zip(sample.ldr_window.frames, sample.gt_hdr)):
        ldr_name, hdr_name = f"ldr_{pos:05d}.ppm", f"hdr_{pos:05d}.pfm"
        write_ppm(ldr, directory / ldr_name, bits=bits)
        write_pfm(hdr, directory / hdr_name)
        records.append(ManifestRecord(pos, ldr_name, ldr.exposure, hdr_name))
    if sample.gt_flows is not None and len(sample.gt_flows) == 2:
        write_flo(sample.gt_flows[0], directory / "flow_bwd.flo")
        write_flo(sample.gt_flows[1], directory / "flow_fwd.flo")
        records[mid].flow_bwd, records[mid].flow_fwd = "flow_bwd.flo", "flow_fwd.flo"
    path = directory / name
    write_manifest(Manifest(records, 1.0, directory), path)
    return path

"""Training losses: HDR-domain alignment, reconstruction, flow, weighted total."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import tensor as T
from .errors import ConfigError, ShapeError
from .flow import FlowField, warp
from .hdr import MU, LuminanceMask, RadianceFrame, normalize_for_tonemap, tonemap_mu
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 1.0
    lambda_ha: float = 0.5
    lambda_flow: float = 0.001

    def __post_init__(self):
        if min(self.lambda_rec, self.lambda_ha, self.lambda_flow) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class LossParts:
    rec: object
    ha: object
    flow: object = 0.0
    mask_coverage: float = 0.0


@dataclass
class LossReport:
    total: float
    rec: float
    ha: float
    flow: float
    mask_coverage: float
    total_tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_row(self):
        return (self.total, self.rec, self.ha, self.flow)


def _img(x) -> Tensor:
    return x.image if isinstance(x, RadianceFrame) else T.as_tensor(x)


def _flow(f) -> Tensor:
    return f.flow if isinstance(f, FlowField) else T.as_tensor(f)


def _tonemapped(x, white_point, mu):
    return tonemap_mu(normalize_for_tonemap(_img(x), white_point), mu)


def halo_loss(gt_hdr: Sequence, flows: Sequence, mask, mu: float = MU,
              white_point: Optional[float] = None) -> Tensor:
    """Masked tonemapped photometric loss between the reference HDR frame and
    its warped HDR neighbours.

    ``gt_hdr`` holds 3 (or 5) frames with the reference in the middle;
    ``flows`` holds one reference->neighbour flow per neighbour, in frame
    order. Only pixels where the mask is 0 (badly exposed) contribute; the
    sum is divided by the number of such pixel-channel entries.
    """
    frames = list(gt_hdr)
    if len(frames) % 2 == 0 or len(frames) < 3:
        raise ShapeError(f"need an odd number (>= 3) of HDR frames, got {len(frames)}")
    mid = len(frames) // 2
    neighbours = frames[:mid] + frames[mid + 1:]
    if len(flows) != len(neighbours):
        raise ShapeError(f"{len(flows)} flows for {len(neighbours)} neighbours")
    ref = frames[mid]
    if white_point is None:
        white_point = ref.white_point if isinstance(ref, RadianceFrame) else 1.0
    m = mask.mask if isinstance(mask, LuminanceMask) else T.as_tensor(mask)
    ref_t = _tonemapped(ref, white_point, mu)
    c, h, w = ref_t.shape
    if m.shape != (1, h, w):
        raise ShapeError(f"mask shape {m.shape} does not match frames {ref_t.shape}")
    active = Tensor((1.0 - m.data).astype(ref_t.dtype))
    photo = None
    for nb, fl in zip(neighbours, flows):
        fl = _flow(fl)
        if fl.shape != (2, h, w):
            raise ShapeError(f"flow shape {fl.shape} does not match frames {ref_t.shape}")
        nb_t = _tonemapped(nb, white_point, mu)
        if nb_t.shape != ref_t.shape:
            raise ShapeError("HDR frames differ in shape")
        term = T.tabs(ref_t - warp(nb_t, fl))
        photo = term if photo is None else photo + term
    count = float(active.data.sum()) * c
    return T.tsum(photo * active) * (1.0 / max(count, 1.0))


def rec_loss(pred, gt, mu: float = MU, white_point: Optional[float] = None) -> Tensor:
    """Mean |T(pred) - T(gt)| after normalising both by the GT white point."""
    p, g = _img(pred), _img(gt)
    if p.shape != g.shape:
        raise ShapeError(f"rec_loss: {p.shape} vs {g.shape}")
    if white_point is None:
        white_point = gt.white_point if isinstance(gt, RadianceFrame) else 1.0
    return T.tmean(T.tabs(_tonemapped(p, white_point, mu) - _tonemapped(g, white_point, mu)))


def flow_loss(pred: Sequence, gt: Sequence) -> Tensor:
    """Sum over flow pairs of the per-pixel |du| + |dv|, averaged over pixels."""
    if len(pred) != len(gt) or not pred:
        raise ShapeError(f"flow_loss: {len(pred)} predicted vs {len(gt)} GT flows")
    total = None
    for p, g in zip(pred, gt):
        p, g = _flow(p), _flow(g)
        if p.shape != g.shape:
            raise ShapeError(f"flow_loss: {p.shape} vs {g.shape}")
        term = T.tmean(T.tabs(p - g)) * float(p.shape[0])
        total = term if total is None else total + term
    return total


def _scalar(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(parts: LossParts, weights: LossWeights = LossWeights(),
               has_flow_gt: bool = True) -> LossReport:
    """lambda_rec*rec + lambda_ha*ha (+ lambda_flow*flow when GT flow exists)."""
    flow_part = parts.flow if has_flow_gt else 0.0
    terms = [(weights.lambda_rec, parts.rec), (weights.lambda_ha, parts.ha)]
    if has_flow_gt:
        terms.append((weights.lambda_flow, flow_part))
    if any(isinstance(v, Tensor) for _, v in terms):
        total_t = None
        for lam, v in terms:
            term = T.as_tensor(v) * lam
            total_t = term if total_t is None else total_t + term
        total = total_t.item()
    else:
        total_t = None
        total = sum(lam * float(v) for lam, v in terms)
    return LossReport(
        total=total,
        rec=_scalar(parts.rec),
        ha=_scalar(parts.ha),
        flow=_scalar(flow_part),
        mask_coverage=float(parts.mask_coverage),
        total_tensor=total_t,
    )

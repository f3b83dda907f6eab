"""Desk-scale training: Adam updates, mixed real/synthetic batches,
checkpoints and the tiny-overfit harness."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .data import TrainingSample
from .errors import ConfigError, FormatError, NumericFault, TrainingDiverged
from .hdr import DELTA_HIGH, DELTA_LOW, MU, well_exposed_mask
from .losses import LossParts, LossReport, LossWeights, flow_loss, halo_loss, rec_loss, total_loss
from .networks import (FlowNetConfig, FusionNetConfig, WeightStore, init_model, load_weights,
                       save_weights)
from .pipeline import Reconstruction, reconstruct_window, split_weights
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

STATE_HEADER = "HDRFLOW-TRAINSTATE 1"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 1
    max_steps: int = 500
    seed: int = 0
    lr_halving_steps: Tuple[int, ...] = ()
    loss_weights: LossWeights = field(default_factory=LossWeights)
    mu: float = MU
    delta_low: float = DELTA_LOW
    delta_high: float = DELTA_HIGH
    channel_divisor: int = 4

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.channel_divisor < 1:
            raise ConfigError("channel_divisor must be >= 1")

    def lr_at(self, step: int) -> float:
        halvings = sum(1 for s in self.lr_halving_steps if step >= s)
        return self.learning_rate * 0.5 ** halvings


@dataclass
class OptimizerState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: WeightStore, grads: Dict[str, np.ndarray], state: OptimizerState,
                config: TrainConfig) -> OptimizerState:
    """One Adam(W) step, in place on ``params``. Decay is decoupled."""
    b1, b2 = config.betas
    t = state.step + 1
    lr = config.lr_at(state.step)
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        m = b1 * m + (1 - b1) * g if m is not None else (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g if v is not None else (1 - b2) * g * g
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        if lr == 0.0:
            continue
        step = (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        if config.weight_decay:
            step = step + config.weight_decay * p.data
        p.data = (p.data - lr * step).astype(p.dtype)
    state.step = t
    return state


def sample_loss(sample: TrainingSample, flow_w: WeightStore, fusion_w: WeightStore,
                config: TrainConfig) -> Tuple[LossReport, Reconstruction]:
    """Forward one window and assemble the weighted loss."""
    recon = reconstruct_window(sample.ldr_window, flow_w, fusion_w)
    mid = len(sample.gt_hdr) // 2
    gt_ref = sample.gt_hdr[mid]
    rec = rec_loss(recon.hdr, gt_ref, config.mu)
    mask = well_exposed_mask(sample.ldr_window.reference, config.delta_low, config.delta_high)
    ha = halo_loss(sample.gt_hdr, recon.flows, mask, config.mu, gt_ref.white_point)
    flow = flow_loss(recon.flows, sample.gt_flows) if sample.has_flow_gt else 0.0
    parts = LossParts(rec, ha, flow, 1.0 - mask.coverage)
    return total_loss(parts, config.loss_weights, sample.has_flow_gt), recon


def _mean_reports(reports: List[LossReport]) -> LossReport:
    n = float(len(reports))
    return LossReport(
        total=sum(r.total for r in reports) / n,
        rec=sum(r.rec for r in reports) / n,
        ha=sum(r.ha for r in reports) / n,
        flow=sum(r.flow for r in reports) / n,
        mask_coverage=sum(r.mask_coverage for r in reports) / n,
    )


def train_step(batch: Sequence[TrainingSample], weights: WeightStore, config: TrainConfig,
               state: Optional[OptimizerState] = None) -> Tuple[LossReport, OptimizerState]:
    """Forward, backward and one optimizer update over a batch.

    ``weights`` holds both networks (``flow.`` / ``fusion.`` prefixes) and is
    updated in place. The batch loss is the mean of per-sample totals; the
    flow term only enters for samples carrying GT flow.
    """
    if not batch:
        raise ConfigError("empty batch")
    arity = {len(s.ldr_window.frames) for s in batch}
    if len(arity) != 1:
        raise ConfigError(f"mixed window lengths in one batch: {sorted(arity)}")
    state = state or OptimizerState()
    lw = config.loss_weights
    params = list(weights.items())
    for _, p in params:
        p.requires_grad = True
        p.grad = None
    flow_w, fusion_w = split_weights(weights)

    reports, total_t = [], None
    try:
        for i, sample in enumerate(batch):
            report, _ = sample_loss(sample, flow_w, fusion_w, config)
            reports.append(report)
            if report.total_tensor is not None:
                term = report.total_tensor * (1.0 / len(batch))
                total_t = term if total_t is None else total_t + term
        if not all(np.isfinite(r.total) for r in reports):
            raise NumericFault("non-finite training loss")
        no_loss = lw.lambda_rec == lw.lambda_ha == lw.lambda_flow == 0.0
        if total_t is not None and not no_loss:
            backward(total_t)
    except NumericFault as exc:
        snapshot = {
            "step": state.step,
            "lr": config.lr_at(state.step),
            "losses": [r.as_row() for r in reports],
            "failing_sample": len(reports) if len(reports) < len(batch) else None,
            "cause": str(exc),
        }
        raise NumericFault(f"training aborted at step {state.step}: {exc}", snapshot) from exc
    finally:
        for _, p in params:
            p.requires_grad = False

    mean = _mean_reports(reports)
    if no_loss:
        # nothing to minimise: leave weights and moments untouched
        state.step += 1
        return mean, state
    grads = {name: p.grad for name, p in params if p.grad is not None}
    for _, p in params:
        p.grad = None
    adam_update(weights, grads, state, config)
    return mean, state


def round_robin_batches(samples: Sequence[TrainingSample], batch_size: int,
                        seed: int = 0) -> Iterator[List[TrainingSample]]:
    """Endless batches alternating real and synthetic samples.

    Each source is reshuffled (seeded) whenever it is exhausted; batches are
    filled by taking from the sources in turn.
    """
    if not samples:
        raise ConfigError("no training samples")
    rng = np.random.default_rng(seed)
    pools = {tag: [s for s in samples if s.source_tag == tag] for tag in ("real", "synthetic")}
    pools = {k: v for k, v in pools.items() if v}
    order = {k: [] for k in pools}
    tags = list(pools)
    turn = 0
    while True:
        batch = []
        for _ in range(batch_size):
            tag = tags[turn % len(tags)]
            turn += 1
            if not order[tag]:
                order[tag] = list(rng.permutation(len(pools[tag])))
            batch.append(pools[tag][order[tag].pop(0)])
        yield batch


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

def _state_path(path) -> Path:
    return Path(str(path) + ".state")


def save_checkpoint(path, weights: WeightStore, state: OptimizerState) -> None:
    """Weights plus ``adam.m.*`` / ``adam.v.*`` moments in one HDRW file and
    the step counter in a sidecar ``<path>.state`` text file."""
    store = WeightStore()
    for name, t in weights.items():
        store[name] = t.data
    for name in weights:
        if name in state.m:
            store["adam.m." + name] = state.m[name]
            store["adam.v." + name] = state.v[name]
    save_weights(store, path)
    _state_path(path).write_text(f"{STATE_HEADER}\nstep {state.step}\n", encoding="ascii")


def load_checkpoint(path) -> Tuple[WeightStore, OptimizerState]:
    store = load_weights(path)
    weights = WeightStore()
    state = OptimizerState()
    for name, t in store.items():
        if name.startswith("adam.m."):
            state.m[name[7:]] = t.data
        elif name.startswith("adam.v."):
            state.v[name[7:]] = t.data
        else:
            weights[name] = t
    side = _state_path(path)
    if side.exists():
        lines = side.read_text(encoding="ascii").split("\n")
        if lines[0].strip() != STATE_HEADER:
            raise FormatError(f"{side}: missing '{STATE_HEADER}' header")
        for line in lines[1:]:
            fields = line.split()
            if len(fields) == 2 and fields[0] == "step":
                state.step = int(fields[1])
    elif state.m:
        raise FormatError(f"{side}: optimizer moments present but state file missing")
    return weights, state


# ----------------------------------------------------------------------
# tiny overfit
# ----------------------------------------------------------------------

@dataclass
class OverfitResult:
    curve: List[float]
    reports: List[LossReport]
    weights: WeightStore
    state: OptimizerState

    @property
    def reduction(self) -> float:
        return 1.0 - min(self.curve) / self.curve[0]


def model_for_sample(sample: TrainingSample, divisor: int = 4, seed: int = 0) -> WeightStore:
    n_exp = len(sample.ldr_window.schedule.pattern)
    return init_model(FlowNetConfig().scaled(divisor),
                      FusionNetConfig.for_exposures(n_exp, divisor), seed)


def overfit_tiny(sample: TrainingSample, config: TrainConfig,
                 weights: Optional[WeightStore] = None) -> OverfitResult:
    """Repeated train_step on one sample; returns the per-step L_total curve.

    Raises TrainingDiverged when the loss exceeds 10x its initial value or
    turns non-finite after the first step.
    """
    weights = weights if weights is not None else model_for_sample(
        sample, config.channel_divisor, config.seed)
    state = OptimizerState()
    curve, reports = [], []
    for step in range(config.max_steps):
        try:
            report, state = train_step([sample], weights, config, state)
        except NumericFault as exc:
            if not curve:
                raise
            raise TrainingDiverged(f"non-finite values at step {step}: {exc}", curve) from exc
        curve.append(report.total)
        reports.append(report)
        if step % 50 == 0:
            log.debug("step %d total=%.6g rec=%.6g ha=%.6g flow=%.6g", step, *report.as_row())
        if report.total > 10.0 * curve[0]:
            raise TrainingDiverged(
                f"loss {report.total:.4g} at step {step} exceeds 10x the initial {curve[0]:.4g}", curve)
    return OverfitResult(curve, reports, weights, state)


def endpoint_error(pred_flows: Sequence, gt_flows: Sequence) -> float:
    """Mean Euclidean distance between predicted and reference flow vectors."""
    errs = []
    for p, g in zip(pred_flows, gt_flows):
        p = p.flow.data if hasattr(p, "flow") else (p.data if isinstance(p, Tensor) else np.asarray(p))
        g = g.flow.data if hasattr(g, "flow") else (g.data if isinstance(g, Tensor) else np.asarray(g))
        errs.append(np.sqrt(((p.astype(np.float64) - g) ** 2).sum(axis=0)).mean())
    return float(np.mean(errs))


def predicted_flows(sample: TrainingSample, weights: WeightStore) -> List[Tensor]:
    flow_w, fusion_w = split_weights(weights)
    return reconstruct_window(sample.ldr_window, flow_w, fusion_w).flows


def smoothed(curve: Sequence[float], window: int = 25) -> np.ndarray:
    c = np.asarray(curve, dtype=np.float64)
    if c.size < window:
        return c.copy()
    return np.convolve(c, np.ones(window) / window, mode="valid")

"""Central finite-difference checks against the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{self.name} checked={self.checked} max_rel_err={self.max_rel_err:.3e} {verdict}"


def relative_error(analytic, numeric, floor: float = 1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor] | Sequence[Tensor],
    *,
    name: str = "grad",
    eps: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
    tolerance: float = 1e-3,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare backward() against (f(x+h) - f(x-h)) / 2h.

    ``loss_fn`` must rebuild the graph from the current contents of the
    parameter tensors; they are perturbed in place and restored. With
    ``max_coords`` set, that many coordinates are drawn per tensor.
    """
    items = list(params.items()) if isinstance(params, dict) else list(enumerate(params))
    for _, p in items:
        p.data = np.array(p.data)  # writable, contiguous private copy
        p.requires_grad = True
        p.grad = None
    backward(loss_fn())
    rng = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    for _, p in items:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + eps
            f_plus = loss_fn().item()
            flat[k] = orig - eps
            f_minus = loss_fn().item()
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            err = float(relative_error(analytic.reshape(-1)[k], numeric, floor))
            worst = max(worst, err)
            checked += 1
    return GradCheckResult(name, worst, checked, tolerance)


# ----------------------------------------------------------------------
# the standard suite (float64, 16x16 inputs, reduced-width networks)
# ----------------------------------------------------------------------

SUITE_MODULES = ("ops", "losses", "networks")


def _rand(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape).astype(np.float64))


def ops_checks(seed: int = 0, eps: float = 1e-6) -> List[GradCheckResult]:
    from . import tensor as T
    from .flow import warp
    from .hdr import tonemap_mu
    from .networks import fuse_hdr

    rng = np.random.default_rng(seed)
    results = []

    def run(name, params, fn):
        probe = np.random.default_rng(seed + len(results))
        coeff = None

        def loss():
            nonlocal coeff
            out = fn()
            if coeff is None:
                coeff = Tensor(probe.standard_normal(out.shape))
            return T.tsum(out * coeff)

        results.append(check_gradients(loss, params, name=f"ops.{name}", eps=eps, max_coords=24, seed=seed))

    x, w, b = _rand(rng, 2, 3, 8, 8), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)
    run("conv2d", {"x": x, "w": w, "b": b}, lambda: T.conv2d(x, T.ConvSpec(3, 4, 3, 3), w, b))
    run("conv2d_stride2", {"x": x, "w": w, "b": b}, lambda: T.conv2d(x, T.ConvSpec(3, 4, 3, 3, stride=2), w, b))
    wd = _rand(rng, 3, 1, 5, 5)
    run("conv2d_depthwise", {"x": x, "w": wd}, lambda: T.conv2d(x, T.ConvSpec(3, 3, 5, 5, depthwise=True), wd))
    wt, bt = _rand(rng, 3, 2, 4, 4), _rand(rng, 2)
    run("deconv2d", {"x": x, "w": wt, "b": bt}, lambda: T.deconv2d(x, T.ConvSpec(3, 2, 4, 4, stride=2), wt, bt))
    run("avg_pool2", {"x": x}, lambda: T.avg_pool2(x))
    run("bilinear_resize", {"x": x}, lambda: T.bilinear_resize(x, 13, 6))
    run("sigmoid", {"x": x}, lambda: T.sigmoid(x * 3.0))
    img = _rand(rng, 3, 8, 8, lo=0.0)
    fl = _rand(rng, 2, 8, 8, lo=-2.0, hi=2.0)
    run("warp", {"image": img, "flow": fl}, lambda: warp(img, fl))
    h = _rand(rng, 3, 8, 8, lo=0.01, hi=1.0)
    run("tonemap_mu", {"h": h}, lambda: tonemap_mu(h))
    wm = _rand(rng, 3, 8, 8, lo=0.05, hi=0.95)
    cands = [_rand(rng, 3, 8, 8, lo=0.0, hi=2.0) for _ in range(3)]
    params = {"weights": wm, **{f"cand{i}": c for i, c in enumerate(cands)}}
    run("fuse_hdr", params, lambda: fuse_hdr(wm, cands).image)
    return results


def loss_checks(seed: int = 0, eps: float = 1e-6) -> List[GradCheckResult]:
    from .hdr import RadianceFrame, well_exposed_mask, LdrFrame
    from .losses import LossParts, flow_loss, halo_loss, rec_loss, total_loss

    rng = np.random.default_rng(seed)
    size = 16
    gt = [RadianceFrame(_rand(rng, 3, size, size, lo=0.002, hi=1.0)) for _ in range(3)]
    pred = _rand(rng, 3, size, size, lo=0.002, hi=1.0)
    flows = [_rand(rng, 2, size, size, lo=-1.5, hi=1.5) for _ in range(2)]
    gt_flows = [_rand(rng, 2, size, size, lo=-1.5, hi=1.5) for _ in range(2)]
    ref_ldr = LdrFrame(_rand(rng, 3, size, size, lo=0.0, hi=1.0), 1.0)
    mask = well_exposed_mask(ref_ldr)

    def rec():
        return rec_loss(pred, gt[1])

    def ha():
        return halo_loss(gt, flows, mask)

    def fl():
        return flow_loss(flows, gt_flows)

    def tot():
        return total_loss(LossParts(rec(), ha(), fl())).total_tensor

    everything = {"pred": pred, "flow_prev": flows[0], "flow_next": flows[1]}
    return [
        check_gradients(rec, {"pred": pred}, name="losses.rec", eps=eps, max_coords=64, seed=seed),
        check_gradients(ha, {"flow_prev": flows[0], "flow_next": flows[1]}, name="losses.ha",
                        eps=eps, max_coords=64, seed=seed),
        check_gradients(fl, {"flow_prev": flows[0], "flow_next": flows[1]}, name="losses.flow",
                        eps=eps, max_coords=64, seed=seed),
        check_gradients(tot, everything, name="losses.total", eps=eps, max_coords=64, seed=seed),
    ]


def network_checks(seed: int = 0, eps: float = 1e-6, divisor: int = 8,
                   coords: int = 3) -> List[GradCheckResult]:
    """L_rec, L_HA, L_flow and L_total through the whole pipeline (warp and
    both networks) against finite differences on every parameter tensor."""
    from .data import make_translation_sample, to_float64
    from .hdr import well_exposed_mask
    from .losses import LossParts, flow_loss, halo_loss, rec_loss, total_loss
    from .networks import FlowNetConfig, FusionNetConfig, init_model
    from .pipeline import reconstruct_window, split_weights

    sample = to_float64(make_translation_sample(16, (1, 0), seed=seed))
    store = init_model(FlowNetConfig().scaled(divisor), FusionNetConfig.for_exposures(2, divisor), seed)
    rng = np.random.default_rng(seed)
    for name, t in store.items():
        t.data = t.data.astype(np.float64)
        if name.endswith(".bias"):
            # zero biases put ReLU inputs exactly on the kink in flat regions,
            # where a central difference sees the mean of both one-sided slopes
            t.data = rng.uniform(-0.05, 0.05, size=t.shape)
    # keep the initial flows within a few pixels so the warp is exercised
    # away from the clamped border
    last = max(n for n in store if n.startswith("flow.head.") and n.endswith(".weight"))
    store[last].data *= 0.02
    flow_w, fusion_w = split_weights(store)
    mask = well_exposed_mask(sample.ldr_window.reference)
    params = dict(store.items())

    def parts():
        r = reconstruct_window(sample.ldr_window, flow_w, fusion_w)
        return (rec_loss(r.hdr, sample.gt_hdr[1]), halo_loss(sample.gt_hdr, r.flows, mask),
                flow_loss(r.flows, sample.gt_flows))

    fns = {
        "rec": lambda: parts()[0],
        "ha": lambda: parts()[1],
        "flow": lambda: parts()[2],
        "total": lambda: total_loss(LossParts(*parts())).total_tensor,
    }
    return [check_gradients(fn, params, name=f"networks.{k}", eps=eps, max_coords=coords, seed=seed)
            for k, fn in fns.items()]


def run_suite(module: str = "all", seed: int = 0) -> List[GradCheckResult]:
    if module not in SUITE_MODULES + ("all",):
        raise ValueError(f"unknown gradcheck module {module!r}")
    results = []
    if module in ("all", "ops"):
        results += ops_checks(seed)
    if module in ("all", "losses"):
        results += loss_checks(seed)
    if module in ("all", "networks"):
        results += network_checks(seed)
    return results

"""Window-level HDR reconstruction for 2- and 3-exposure sequences.

Fusion-input channel order (fixed; trained weights depend on it):

* first the LDR block, then the linear block, 3 channels per image;
* inside each block: reference, aligned neighbours in frame order, original
  neighbours in frame order.

For 2 exposures that is ``t, t-1~, t+1~, t-1, t+1`` (30 channels); for 3
exposures ``t, t-2~, t-1~, t+1~, t+2~, t-2, t-1, t+1, t+2`` (54 channels).
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

from . import tensor as T
from .errors import ConfigError, ShapeError
from .flow import warp
from .hdr import ExposureSchedule, LdrFrame, RadianceFrame, adjust_exposure, ldr_to_linear
from .networks import WeightStore, flownet_tensor, fuse_hdr, fusionnet_forward
from .tensor import Tensor

log = logging.getLogger(__name__)


def _matches_cycle(exposures, pattern) -> bool:
    n = len(pattern)
    for phase in range(n):
        if all(math.isclose(e, pattern[(k + phase) % n], rel_tol=1e-9)
               for k, e in enumerate(exposures)):
            return True
    return False


@dataclass
class SequenceWindow:
    frames: List[LdrFrame]
    schedule: ExposureSchedule

    def __post_init__(self):
        self.frames = list(self.frames)
        if len(self.frames) != self.schedule.window_length:
            raise ConfigError(
                f"{len(self.schedule.pattern)}-exposure schedule needs {self.schedule.window_length} frames, got {len(self.frames)}"
            )
        if not _matches_cycle([f.exposure for f in self.frames], self.schedule.pattern):
            raise ConfigError(
                f"frame exposures {[f.exposure for f in self.frames]} do not follow {self.schedule.pattern}"
            )
        shape = self.frames[0].shape
        if any(f.shape != shape for f in self.frames):
            raise ShapeError("all frames in a window must share one shape")

    @property
    def reference_index(self) -> int:
        return len(self.frames) // 2

    @property
    def reference(self) -> LdrFrame:
        return self.frames[self.reference_index]

    @property
    def neighbour_positions(self) -> List[int]:
        r = self.reference_index
        return [k for k in range(len(self.frames)) if k != r]


@dataclass
class FusionInput:
    ldr_stack: List[Tensor]
    linear_stack: List[Tensor]
    channel_order: List[str]

    def tensor(self) -> Tensor:
        return T.concat_channels(self.ldr_stack + self.linear_stack)

    @property
    def channels(self) -> int:
        return 3 * (len(self.ldr_stack) + len(self.linear_stack))


@dataclass
class Reconstruction:
    hdr: RadianceFrame
    flows: List[Tensor]  # reference -> neighbour, neighbours in frame order
    weight_maps: Tensor
    fusion_input: FusionInput
    linear_candidates: List[Tensor]


def _flow_inputs(window: SequenceWindow):
    """Flow-net input stacks and, per stack, which window positions its two
    output flows belong to."""
    f = window.frames
    gamma = window.schedule.gamma
    r = window.reference_index
    if len(f) == 3:
        groups = [(0, 2)]
    else:
        # the reference is re-exposed to match the third frame of each triple
        if not (math.isclose(f[0].exposure, f[3].exposure) and math.isclose(f[1].exposure, f[4].exposure)):
            raise ConfigError("3-exposure window must pair frames t-2/t+1 and t-1/t+2 by exposure")
        groups = [(0, 3), (1, 4)]
    stacks = []
    for a, b in groups:
        g = adjust_exposure(f[r], f[b].exposure, gamma)
        stacks.append(T.concat_channels([f[a].image, g.image, f[b].image]))
    return stacks, groups


def reconstruct_window(window: SequenceWindow, flow_w: WeightStore, fusion_w: WeightStore
                       ) -> Reconstruction:
    f = window.frames
    gamma = window.schedule.gamma
    r = window.reference_index
    h, w = window.reference.shape[-2:]
    if h % 16 or w % 16:
        raise ShapeError(f"frame size {h}x{w} is not divisible by 16")

    stacks, groups = _flow_inputs(window)
    batch = T.concat([T.reshape(s, (1,) + s.shape) for s in stacks], axis=0)
    out = flownet_tensor(batch, flow_w)
    flow_of = {}
    for i, (a, b) in enumerate(groups):
        flow_of[a] = out[i, 0:2]
        flow_of[b] = out[i, 2:4]

    linear = [ldr_to_linear(fr, gamma).image for fr in f]
    nbrs = window.neighbour_positions
    flows = [flow_of[k] for k in nbrs]
    aligned_ldr = [warp(f[k].image, flow_of[k]) for k in nbrs]
    # aligned linear candidates warp the linear neighbour directly
    aligned_lin = [warp(linear[k], flow_of[k]) for k in nbrs]

    names = [f"t{k - r:+d}" if k != r else "t" for k in range(len(f))]
    order = ["t"] + [names[k] + "~" for k in nbrs] + [names[k] for k in nbrs]
    fusion_input = FusionInput(
        ldr_stack=[f[r].image] + aligned_ldr + [f[k].image for k in nbrs],
        linear_stack=[linear[r]] + aligned_lin + [linear[k] for k in nbrs],
        channel_order=order,
    )
    weight_maps = fusionnet_forward(fusion_input.tensor(), fusion_w)
    candidates = fusion_input.linear_stack
    hdr = fuse_hdr(weight_maps, candidates)
    return Reconstruction(hdr, flows, weight_maps, fusion_input, candidates)


def reconstruct_2exp(window: SequenceWindow, flow_w: WeightStore, fusion_w: WeightStore) -> RadianceFrame:
    if len(window.frames) != 3:
        raise ConfigError("reconstruct_2exp needs a 3-frame window")
    return reconstruct_window(window, flow_w, fusion_w).hdr


def reconstruct_3exp(window: SequenceWindow, flow_w: WeightStore, fusion_w: WeightStore) -> RadianceFrame:
    if len(window.frames) != 5:
        raise ConfigError("reconstruct_3exp needs a 5-frame window")
    return reconstruct_window(window, flow_w, fusion_w).hdr


def window_indices(n_frames: int, window_length: int) -> List[int]:
    half = window_length // 2
    return list(range(half, n_frames - half))


def split_weights(weights) -> Tuple[WeightStore, WeightStore]:
    """Accept a (flow, fusion) pair or one store with flow./fusion. prefixes."""
    if isinstance(weights, WeightStore):
        return weights.subset("flow."), weights.subset("fusion.")
    flow_w, fusion_w = weights
    return flow_w, fusion_w


def process_sequence(frames: Sequence[LdrFrame], schedule: ExposureSchedule, weights,
                     output_sink: Optional[Callable[[int, RadianceFrame], None]] = None,
                     threads: int = 1, timings: Optional[list] = None) -> List[RadianceFrame]:
    """Reconstruct every reference frame that has a complete window.

    Boundary frames without a full window are skipped (and logged). Windows
    are independent, so up to ``threads`` run concurrently; results and sink
    calls keep reference-index order. If ``timings`` is a list it receives
    one (reference index, seconds) pair per window.
    """
    length = schedule.window_length
    if len(frames) < length:
        raise ConfigError(f"need at least {length} frames, got {len(frames)}")
    flow_w, fusion_w = split_weights(weights)
    refs = window_indices(len(frames), length)
    half = length // 2
    skipped = [i for i in range(len(frames)) if i not in refs]
    if skipped:
        log.info("skipping boundary frames without a full window: %s", skipped)

    def run(ref):
        start = time.perf_counter()
        window = SequenceWindow(frames[ref - half: ref + half + 1], schedule)
        hdr = reconstruct_window(window, flow_w, fusion_w).hdr
        return hdr, time.perf_counter() - start

    results: List[RadianceFrame] = []
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        for ref, (hdr, seconds) in zip(refs, pool.map(run, refs)):
            results.append(hdr)
            if timings is not None:
                timings.append((ref, seconds))
            if output_sink is not None:
                output_sink(ref, hdr)
    return results

import hashlib
import logging

import numpy as np
import pytest

from hdrflow.data import make_translation_sample, synthesize_window
from hdrflow.errors import ConfigError, ShapeError
from hdrflow.hdr import ExposureSchedule, LdrFrame, RadianceFrame, linear_to_ldr
from hdrflow.networks import (FlowNetConfig, FusionNetConfig, WeightStore, fusionnet_forward,
                              init_model, init_weights)
from hdrflow.pipeline import (SequenceWindow, process_sequence, reconstruct_2exp, reconstruct_3exp,
                              reconstruct_window, split_weights, window_indices)
from hdrflow.tensor import Tensor

CANARY = "0cc076fee17dc28a12e01bbac2cf0253f1c7ee098a810c566a36d35daf62c310"


def small_model(n_exp, seed=0):
    return split_weights(init_model(FlowNetConfig().scaled(8), FusionNetConfig.for_exposures(n_exp, 8), seed))


def zeroed(store):
    return WeightStore({k: np.zeros_like(v.data) for k, v in store.items()})


def static_frames(n, schedule, rng, size=32, scale=None):
    top = 0.9 / max(schedule.pattern) if scale is None else scale
    h = RadianceFrame(Tensor(rng.uniform(0.1, 1.0, (3, size, size)) * top))
    return h, [linear_to_ldr(h, schedule.exposure_at(t), schedule.gamma, t) for t in range(n)]


def translation_window(schedule, shift=(2, 1), size=48):
    """Neighbours are exact translations; radiance kept below clipping at every exposure."""
    s = make_translation_sample(size, shift, schedule, seed=5)
    k = 0.95 / (max(schedule.pattern) * max(float(h.image.data.max()) for h in s.gt_hdr))
    hdr = [RadianceFrame(Tensor(h.image.data.astype(np.float64) * k)) for h in s.gt_hdr]
    return synthesize_window(hdr, schedule), hdr


def selecting_fusion(n_exp, keep):
    fw = zeroed(init_weights(FusionNetConfig.for_exposures(n_exp, 8), 1))
    b = np.full(fw["up2.conv.bias"].shape, -40.0)
    b[list(keep)] = 40.0
    fw["up2.conv.bias"] = b
    return fw


def biased_flow(first, second):
    fl = zeroed(init_weights(FlowNetConfig().scaled(8), 0))
    fl["head.c2.bias"] = np.array(list(first) + list(second), np.float64) / 4.0
    return fl


class TestWindows:
    @pytest.mark.parametrize("n,length,expect", [
        (3, 3, [1]), (10, 3, list(range(1, 9))), (7, 5, [2, 3, 4]), (5, 5, [2])])
    def test_indices(self, n, length, expect):
        assert window_indices(n, length) == expect

    @pytest.mark.parametrize("n,sched,expect", [
        (3, ExposureSchedule.two_exposure(), [1]),
        (10, ExposureSchedule.two_exposure(), list(range(1, 9))),
        (7, ExposureSchedule.three_exposure(), [2, 3, 4])])
    def test_process_sequence_counts(self, n, sched, expect, rng, caplog):
        _, frames = static_frames(n, sched, rng, 16)
        seen = []
        with caplog.at_level(logging.INFO, logger="hdrflow.pipeline"):
            out = process_sequence(frames, sched, small_model(len(sched.pattern)),
                                   output_sink=lambda i, h: seen.append(i))
        assert seen == expect and len(out) == len(expect)
        if n > len(expect):
            assert "skipping" in caplog.text

    def test_too_short(self, rng):
        sched = ExposureSchedule.three_exposure()
        _, frames = static_frames(4, sched, rng, 16)
        with pytest.raises(ConfigError):
            process_sequence(frames, sched, small_model(3))

    def test_schedule_mismatch(self, rng):
        sched = ExposureSchedule.two_exposure()
        _, frames = static_frames(3, sched, rng, 16)
        frames[2] = LdrFrame(frames[2].image, 2.0, 2)
        with pytest.raises(ConfigError):
            SequenceWindow(frames, sched)
        with pytest.raises(ConfigError):
            SequenceWindow(frames[:2], sched)

    def test_phase_shift_accepted(self, rng):
        sched = ExposureSchedule.two_exposure()
        h = RadianceFrame(Tensor(rng.uniform(0, 0.1, (3, 16, 16))))
        frames = [linear_to_ldr(h, sched.exposure_at(t, 1)) for t in range(3)]
        assert SequenceWindow(frames, sched).reference.exposure == 1.0

    def test_size_not_divisible(self, rng):
        sched = ExposureSchedule.two_exposure()
        _, frames = static_frames(3, sched, rng, 20)
        with pytest.raises(ShapeError):
            reconstruct_2exp(SequenceWindow(frames, sched), *small_model(2))

    def test_wrong_protocol(self, rng):
        sched = ExposureSchedule.two_exposure()
        _, frames = static_frames(3, sched, rng, 16)
        with pytest.raises(ConfigError):
            reconstruct_3exp(SequenceWindow(frames, sched), *small_model(2))


class TestReconstruction:
    def test_two_exposure_shapes(self, rng):
        sched = ExposureSchedule.two_exposure()
        _, frames = static_frames(3, sched, rng, 32)
        r = reconstruct_window(SequenceWindow(frames, sched), *small_model(2))
        assert r.weight_maps.shape == (5, 32, 32)
        assert r.hdr.shape == (3, 32, 32)
        assert r.fusion_input.channels == 30 and r.fusion_input.tensor().shape == (30, 32, 32)
        assert len(r.flows) == 2

    def test_three_exposure_shapes(self, rng):
        sched = ExposureSchedule.three_exposure()
        _, frames = static_frames(5, sched, rng, 32)
        r = reconstruct_window(SequenceWindow(frames, sched), *small_model(3))
        assert r.weight_maps.shape == (9, 32, 32)
        assert r.fusion_input.channels == 54
        assert r.fusion_input.channel_order == ["t", "t-2~", "t-1~", "t+1~", "t+2~", "t-2", "t-1", "t+1", "t+2"]
        assert len(r.flows) == 4

    def test_linear_stack_matches_originals(self, rng):
        from hdrflow.hdr import ldr_to_linear
        sched = ExposureSchedule.two_exposure()
        _, frames = static_frames(3, sched, rng, 16)
        r = reconstruct_window(SequenceWindow(frames, sched), *small_model(2))
        fi = r.fusion_input
        for ldr, lin in [(fi.ldr_stack[0], fi.linear_stack[0]), (fi.ldr_stack[3], fi.linear_stack[3])]:
            exp = frames[1].exposure if ldr is fi.ldr_stack[0] else frames[0].exposure
            np.testing.assert_array_equal(lin.data, ldr_to_linear(LdrFrame(ldr, exp)).image.data)

    @pytest.mark.parametrize("sched", [ExposureSchedule.two_exposure(), ExposureSchedule.three_exposure()])
    def test_static_scene_fixed_point(self, sched, rng):
        n = sched.window_length
        truth, frames = static_frames(n, sched, rng, 32)
        flow_w = zeroed(init_weights(FlowNetConfig().scaled(8), 0))
        fusion_w = zeroed(init_weights(FusionNetConfig.for_exposures(len(sched.pattern), 8), 1))
        out = reconstruct_window(SequenceWindow(frames, sched), flow_w, fusion_w).hdr.image.data
        np.testing.assert_allclose(out, truth.image.data, atol=1e-5, rtol=1e-5)

    def test_static_scene_inside_candidate_hull(self, rng):
        sched = ExposureSchedule.three_exposure()
        _, frames = static_frames(5, sched, rng, 32, scale=0.3)  # long exposures clip
        flow_w = zeroed(init_weights(FlowNetConfig().scaled(8), 0))
        r = reconstruct_window(SequenceWindow(frames, sched), flow_w, small_model(3)[1])
        c = np.stack([x.data for x in r.linear_candidates]).astype(np.float64)
        out = r.hdr.image.data
        assert np.all(out >= c.min(0) - 1e-6) and np.all(out <= c.max(0) + 1e-6)

    def test_translation_two_exposure(self):
        sched = ExposureSchedule.two_exposure()
        dx, dy = 2, 1
        window, hdr = translation_window(sched, (dx, dy))
        flow_w = biased_flow((dx, dy), (-dx, -dy))
        fusion_w = selecting_fusion(2, keep=(1, 2))  # aligned neighbours only
        out = reconstruct_2exp(window, flow_w, fusion_w).image.data
        ref = hdr[1].image.data
        m = 4
        np.testing.assert_allclose(out[:, m:-m, m:-m], ref[:, m:-m, m:-m], atol=1e-4, rtol=0)

    def test_translation_three_exposure(self):
        sched = ExposureSchedule.three_exposure()
        dx, dy = 1, 2
        window, hdr = translation_window(sched, (dx, dy))
        # one shared flow net: its first pair serves t-2 and t-1, its second t+1 and t+2,
        # so a constant head can only be exact for t-1 and t+1; fusion keeps those two
        flow_w = biased_flow((dx, dy), (-dx, -dy))
        fusion_w = selecting_fusion(3, keep=(2, 3))
        out = reconstruct_3exp(window, flow_w, fusion_w).image.data
        ref = hdr[2].image.data
        m = 6
        np.testing.assert_allclose(out[:, m:-m, m:-m], ref[:, m:-m, m:-m], atol=1e-4, rtol=0)

    def test_channel_order_canary(self):
        s = make_translation_sample(32, (1, 1), seed=11)
        fw, uw = small_model(2)
        r = reconstruct_window(s.ldr_window, fw, uw)
        digest = hashlib.sha256(np.round(r.hdr.image.data.astype(np.float64), 4).tobytes()).hexdigest()
        assert r.fusion_input.channel_order == ["t", "t-1~", "t+1~", "t-1", "t+1"]
        assert digest == CANARY
        # a swapped assembly produces different weights, so the canary would trip
        fi = r.fusion_input
        swapped = [fi.ldr_stack[i] for i in (0, 2, 1, 3, 4)] + fi.linear_stack
        from hdrflow import tensor as T
        wm = fusionnet_forward(T.concat_channels(swapped), uw)
        assert not np.allclose(wm.data, r.weight_maps.data)

    def test_deterministic_with_threads(self, rng):
        sched = ExposureSchedule.two_exposure()
        truth, frames = static_frames(6, sched, rng, 32)
        model = small_model(2, 4)
        a = process_sequence(frames, sched, model, threads=1)
        b = process_sequence(frames, sched, model, threads=3)
        assert [x.image.data.tobytes() for x in a] == [x.image.data.tobytes() for x in b]

    def test_combined_store_accepted(self, rng):
        sched = ExposureSchedule.two_exposure()
        _, frames = static_frames(3, sched, rng, 16)
        store = init_model(FlowNetConfig().scaled(8), FusionNetConfig.for_exposures(2, 8), 0)
        timings = []
        out = process_sequence(frames, sched, store, timings=timings)
        assert len(out) == 1 and timings[0][0] == 1 and timings[0][1] > 0

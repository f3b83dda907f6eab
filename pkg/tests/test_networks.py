import struct
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from hdrflow import tensor as T
from hdrflow.errors import ConfigError, FormatError, ShapeError
from hdrflow.networks import (FlowNetConfig, FusionNetConfig, WeightStore, flownet_forward, flownet_layers,
                              flownet_tensor, fuse_hdr, fusionnet_forward, fusionnet_layers, init_model,
                              init_weights, load_weights, mlk_block, save_weights)
from hdrflow.tensor import Tensor


@pytest.fixture(scope="module")
def flow_full():
    return init_weights(FlowNetConfig(), seed=0)


def zeros_like_store(store):
    return WeightStore({k: np.zeros_like(v.data) for k, v in store.items()})


class TestFlowNet:
    def test_structure_64(self, flow_full, rng):
        x = Tensor(rng.uniform(0, 1, (9, 64, 64)).astype(np.float32))
        feats = {}
        f_prev, f_next = flownet_forward(x, flow_full, feats)
        assert feats["z_e"].shape == (1, 256, 4, 4)
        assert f_prev.flow.shape == (2, 64, 64) and f_next.flow.shape == (2, 64, 64)
        assert feats["feature_2"].shape == (1, 32, 32, 32)
        assert feats["feature_4"].shape == (1, 64, 16, 16)
        assert feats["feature_8"].shape == (1, 128, 8, 8)
        assert feats["feature_16"].shape == (1, 256, 4, 4)
        assert feats["concat_4"].shape == (1, 64 + 9, 16, 16)
        assert feats["flow_quarter"].shape == (1, 4, 16, 16)

    @pytest.mark.parametrize("h,w", [(16, 32), (48, 16)])
    def test_output_matches_input_resolution(self, h, w, rng):
        ws = init_weights(FlowNetConfig().scaled(8), 0)
        out = flownet_tensor(Tensor(rng.uniform(0, 1, (9, h, w))), ws)
        assert out.shape == (4, h, w)

    def test_indivisible_dims(self, flow_full):
        with pytest.raises(ShapeError, match="divisible by 16"):
            flownet_tensor(Tensor(np.zeros((9, 40, 64), np.float32)), flow_full)

    def test_missing_weight(self, flow_full):
        ws = WeightStore({k: v for k, v in flow_full.items() if k != "mlk.merge.weight"})
        with pytest.raises(ConfigError, match="merge.weight"):
            flownet_tensor(Tensor(np.zeros((9, 16, 16), np.float32)), ws)

    def test_zero_network_zero_flow(self, flow_full, rng):
        out = flownet_tensor(Tensor(rng.uniform(0, 1, (9, 32, 32)).astype(np.float32)),
                             zeros_like_store(flow_full))
        assert np.all(out.data == 0)

    def test_deterministic_across_threads(self, rng):
        ws = init_weights(FlowNetConfig().scaled(2), 3)
        xs = [Tensor(rng.uniform(0, 1, (9, 32, 32)).astype(np.float32)) for _ in range(4)]
        serial = [flownet_tensor(x, ws).data.tobytes() for x in xs]
        with ThreadPoolExecutor(4) as pool:
            parallel = list(pool.map(lambda x: flownet_tensor(x, ws).data.tobytes(), xs))
        assert serial == parallel
        assert serial[0] == flownet_tensor(xs[0], ws).data.tobytes()


class TestMlk:
    def _weights(self, c, dw_value=None, merge=None):
        ws = WeightStore()
        for k in (7, 9, 11):
            w = np.zeros((c, 1, k, k), np.float64)
            if dw_value == "delta":
                w[:, 0, k // 2, k // 2] = 1.0
            ws[f"mlk.dw{k}.weight"] = w
            ws[f"mlk.dw{k}.bias"] = np.zeros(c)
        m = np.zeros((c, 3 * c, 1, 1))
        if merge == "average":
            for b in range(3):
                m[np.arange(c), b * c + np.arange(c), 0, 0] = 1 / 3
        ws["mlk.merge.weight"] = m
        ws["mlk.merge.bias"] = np.zeros(c)
        return ws

    def test_delta_kernels_average_merge_doubles(self, rng):
        z = Tensor(rng.standard_normal((1, 256, 6, 6)))
        out = mlk_block(z, self._weights(256, "delta", "average"))
        np.testing.assert_allclose(out.data, 2 * z.data, rtol=1e-12)

    def test_zero_weights_pass_through(self, rng):
        z = Tensor(rng.standard_normal((1, 256, 4, 4)))
        assert np.array_equal(mlk_block(z, self._weights(256)).data, z.data)

    def test_impulse_support_radius(self):
        c = 4
        ws = self._weights(c, None, "average")
        ws["mlk.dw11.weight"] = np.ones((c, 1, 11, 11))
        z = np.zeros((1, c, 15, 15))
        z[0, :, 7, 7] = 1.0
        out = mlk_block(Tensor(z), ws).data[0, 0]
        ys, xs = np.nonzero(out)
        assert max(np.abs(ys - 7).max(), np.abs(xs - 7).max()) >= 5


class TestFusionNet:
    @pytest.mark.parametrize("n_exp,cin,cout", [(2, 30, 5), (3, 54, 9)])
    def test_channels(self, n_exp, cin, cout, rng):
        cfg = FusionNetConfig.for_exposures(n_exp)
        assert cfg.in_channels == cin and cfg.out_weights == cout
        ws = init_weights(cfg, 1)
        out = fusionnet_forward(Tensor(rng.uniform(0, 1, (cin, 64, 64)).astype(np.float32)), ws)
        assert out.shape == (cout, 64, 64)
        assert out.data.min() > 0 and out.data.max() < 1

    def test_config_invariant(self):
        with pytest.raises(ConfigError):
            FusionNetConfig(in_channels=30, out_weights=4)

    def test_zero_network_uniform_blend(self, rng):
        ws = zeros_like_store(init_weights(FusionNetConfig(), 1))
        wm = fusionnet_forward(Tensor(rng.uniform(0, 1, (30, 16, 16))), ws)
        assert np.all(wm.data == 0.5)
        cands = [Tensor(rng.uniform(0, 2, (3, 16, 16))) for _ in range(5)]
        fused = fuse_hdr(wm, cands).image.data
        np.testing.assert_allclose(fused, np.mean([c.data for c in cands], axis=0), rtol=1e-12)

    def test_wrong_input_channels(self):
        ws = init_weights(FusionNetConfig(), 1)
        with pytest.raises(ShapeError):
            fusionnet_forward(Tensor(np.zeros((54, 16, 16), np.float32)), ws)

    def test_indivisible(self):
        ws = init_weights(FusionNetConfig(), 1)
        with pytest.raises(ShapeError):
            fusionnet_forward(Tensor(np.zeros((30, 12, 16), np.float32)), ws)


class TestFuse:
    def test_identical_candidates(self, rng):
        c = rng.uniform(0, 3, (3, 4, 4))
        out = fuse_hdr(Tensor(rng.uniform(0, 1, (5, 4, 4))), [Tensor(c)] * 5).image.data
        np.testing.assert_allclose(out, c, rtol=1e-12)

    def test_selector(self, rng):
        cands = [Tensor(rng.uniform(0, 1, (3, 4, 4))) for _ in range(3)]
        w = np.zeros((3, 4, 4))
        w[1] = 1.0
        out = fuse_hdr(Tensor(w), cands).image.data
        assert np.max(np.abs(out - cands[1].data)) <= 1e-6

    def test_scalar_oracle(self, rng):
        k = 4
        w = rng.uniform(0, 1, (k, 2, 3))
        cands = [rng.uniform(0, 5, (3, 2, 3)) for _ in range(k)]
        out = fuse_hdr(Tensor(w), [Tensor(c) for c in cands]).image.data
        y, x, ch = 1, 2, 0
        ws = [float(w[j, y, x]) for j in range(k)]
        vs = [float(cands[j][ch, y, x]) for j in range(k)]
        num = sum((wj + 1e-6 / k) * vj for wj, vj in zip(ws, vs))
        assert out[ch, y, x] == pytest.approx(num / (sum(ws) + 1e-6), rel=1e-12)
        # the guarded form differs from the unguarded weighted mean by < 1e-5 here
        assert out[ch, y, x] == pytest.approx(sum(a * b for a, b in zip(ws, vs)) / sum(ws), rel=1e-5)

    def test_count_mismatch(self):
        with pytest.raises(ShapeError):
            fuse_hdr(Tensor(np.ones((4, 2, 2))), [Tensor(np.ones((3, 2, 2)))] * 5)

    def test_all_zero_weights_stay_convex(self):
        cands = [Tensor(np.full((3, 2, 2), v)) for v in (1.0, 2.0, 6.0)]
        out = fuse_hdr(Tensor(np.zeros((3, 2, 2))), cands).image.data
        assert np.allclose(out, 3.0)

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float32, (5, 3, 3), elements=st.floats(0, 1, width=32)),
           hnp.arrays(np.float32, (5, 3, 3, 3), elements=st.floats(0, 1e4, width=32)))
    def test_property_convex_bound(self, w, c):
        out = fuse_hdr(Tensor(w), [Tensor(c[j]) for j in range(5)]).image.data
        assert np.all(out >= c.min(axis=0)) and np.all(out <= c.max(axis=0))


class TestWeightsContainer:
    def test_same_seed_identical(self):
        a = init_weights(FusionNetConfig().scaled(4), 5)
        b = init_weights(FusionNetConfig().scaled(4), 5)
        assert a.equals(b)
        assert not a.equals(init_weights(FusionNetConfig().scaled(4), 6))

    def test_variance_matches_fan_in(self, flow_full):
        layers = {l.name: l for l in flownet_layers(FlowNetConfig()) + fusionnet_layers(FusionNetConfig())}
        stores = [flow_full, init_weights(FusionNetConfig(), 1)]
        checked = 0
        for store in stores:
            for name, t in store.items():
                if name in layers and name.endswith(".weight") and t.data.size >= 1024:
                    target = 2.0 / layers[name].fan_in
                    assert abs(t.data.var() / target - 1) < 0.2, name
                    checked += 1
        assert checked > 20

    def test_round_trip_bitwise(self, tmp_path):
        store = init_model(FlowNetConfig().scaled(8), FusionNetConfig.for_exposures(3, 8), 2)
        save_weights(store, tmp_path / "w.hdrw")
        back = load_weights(tmp_path / "w.hdrw")
        assert list(back) == list(store)
        assert back.equals(store)
        save_weights(back, tmp_path / "w2.hdrw")
        assert (tmp_path / "w.hdrw").read_bytes() == (tmp_path / "w2.hdrw").read_bytes()

    def test_byte_layout(self, tmp_path):
        store = WeightStore({"ab": np.array([[1.0, -2.0, 0.5]], np.float32)})
        save_weights(store, tmp_path / "t.hdrw")
        expect = (b"HDRW" + struct.pack("<II", 1, 1) + struct.pack("<H", 2) + b"ab"
                  + struct.pack("<B", 2) + struct.pack("<II", 1, 3) + struct.pack("<3f", 1.0, -2.0, 0.5))
        assert (tmp_path / "t.hdrw").read_bytes() == expect

    @pytest.mark.parametrize("mutate,match", [
        (lambda b: b"HDRX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b[:10], "truncated"),
        (lambda b: b + b"\0", "trailing"),
    ])
    def test_corrupt_rejected(self, tmp_path, mutate, match):
        save_weights(WeightStore({"x": np.ones((2, 2), np.float32)}), tmp_path / "w.hdrw")
        raw = mutate((tmp_path / "w.hdrw").read_bytes())
        (tmp_path / "bad.hdrw").write_bytes(raw)
        with pytest.raises(FormatError, match=match):
            load_weights(tmp_path / "bad.hdrw")

    def test_duplicate_names_rejected(self, tmp_path):
        entry = struct.pack("<H", 1) + b"x" + struct.pack("<BI", 1, 1) + struct.pack("<f", 1.0)
        (tmp_path / "d.hdrw").write_bytes(b"HDRW" + struct.pack("<II", 1, 2) + entry + entry)
        with pytest.raises(FormatError, match="duplicate"):
            load_weights(tmp_path / "d.hdrw")


def test_every_layer_receives_gradient():
    from hdrflow.data import make_translation_sample
    from hdrflow.trainer import TrainConfig, sample_loss
    from hdrflow.pipeline import split_weights

    sample = make_translation_sample(32, (1, 1), seed=3)
    store = init_model(FlowNetConfig().scaled(4), FusionNetConfig.for_exposures(2, 4), 0)
    rng = np.random.default_rng(0)
    for name, t in store.items():
        if name.endswith(".bias"):
            t.data = rng.uniform(0.01, 0.05, t.shape).astype(np.float32)
        t.requires_grad = True
    flow_w, fusion_w = split_weights(store)
    report, _ = sample_loss(sample, flow_w, fusion_w, TrainConfig())
    T.backward(report.total_tensor)
    dead = [n for n, t in store.items() if t.grad is None or not np.any(t.grad)]
    assert dead == []

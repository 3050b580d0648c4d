import math
from collections import Counter

import numpy as np
import pytest

from trackforge.config import TrackerConfig
from trackforge.maskcore import LabelMap
from trackforge.membank import MemoryBank, MemoryEntry
from trackforge.propagation import (
    FeaturePyramid,
    IdentityBank,
    ModelParams,
    Tracker,
    attention,
    attention_weights,
    decode,
    embed_identities,
    encode_frame,
    gpm_layer,
    labels_from_logits,
    param_shapes,
    propagate,
    scaled_dims,
    upsample_bilinear,
)


def naive_attention(q, k, v):
    """Double-loop reference: explicit softmax per query row."""
    n, c = len(q), len(q[0])
    out = []
    for i in range(n):
        scores = [sum(q[i][a] * k[j][a] for a in range(c)) / math.sqrt(c) for j in range(len(k))]
        top = max(scores)
        ws = [math.exp(s - top) for s in scores]
        z = sum(ws)
        out.append([sum(ws[j] / z * v[j][b] for j in range(len(k))) for b in range(len(v[0]))])
    return np.array(out)


@pytest.fixture(scope="module")
def cfg():
    return TrackerConfig(vis_channels=8, id_channels=6, seed=3)


@pytest.fixture(scope="module")
def params(cfg):
    return ModelParams.seeded(cfg)


def _scene(h=48, w=48, seed=0, objects=2):
    rng = np.random.default_rng(seed)
    img = 0.1 + 0.05 * rng.random((h, w))
    labels = np.zeros((h, w), dtype=int)
    for obj in range(1, objects + 1):
        y, x = rng.integers(0, h - 14), rng.integers(0, w - 14)
        img[y : y + 12, x : x + 12] = 0.2 + 0.7 * obj / objects
        labels[y : y + 12, x : x + 12] = obj
    return img, LabelMap(labels, objects)


class TestEncoder:
    def test_zero_frame_constant(self, params):
        pyr = encode_frame(np.zeros((40, 48)), params)
        for s in (16, 8, 4):
            level = pyr[s]
            assert np.array_equal(level, np.broadcast_to(level[0, 0], level.shape))
            np.testing.assert_array_equal(level[0, 0], np.tanh(params[f"encoder.{s}.bias"]))

    def test_deterministic(self, params):
        img, _ = _scene()
        a, b = encode_frame(img, params), encode_frame(img.copy(), params)
        for s in (16, 8, 4):
            assert a[s].tobytes() == b[s].tobytes()

    def test_shapes(self, params, cfg):
        assert encode_frame(np.zeros((32, 32)), params)[16].shape[:2] == (2, 2)
        pyr = encode_frame(np.zeros((40, 17)), params)
        for s in (16, 8, 4):
            assert pyr[s].shape == (math.ceil(40 / s), math.ceil(17 / s), cfg.vis_channels)

    def test_too_small(self, params):
        with pytest.raises(ValueError):
            encode_frame(np.zeros((15, 32)), params)


class TestIdentities:
    def test_background(self):
        bank = IdentityBank.seeded(2, 5, 0)
        out = embed_identities(LabelMap.background(4, 3, 2), bank)
        assert (out == bank.vectors[0]).all()

    def test_single_object(self):
        bank = IdentityBank.seeded(1, 5, 0)
        labels = np.zeros((4, 4), dtype=int)
        labels[1:3, 1:3] = 1
        out = embed_identities(LabelMap(labels, 1), bank).reshape(-1, 5)
        assert len({row.tobytes() for row in out}) == 2
        assert (out[labels.ravel() == 1] == bank.vectors[1]).all()

    def test_swap_symmetry(self):
        bank = IdentityBank.seeded(3, 5, 1)
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 4, (6, 7))
        swapped = labels.copy()
        swapped[labels == 1], swapped[labels == 2] = 2, 1
        a = embed_identities(LabelMap(labels, 3), bank)
        b = embed_identities(LabelMap(swapped, 3), bank.permuted({1: 2, 2: 1, 3: 3}))
        assert np.array_equal(a, b)

    def test_unknown_label(self):
        with pytest.raises(ValueError):
            embed_identities(LabelMap(np.full((2, 2), 3), 3), IdentityBank.seeded(2, 4, 0))

    def test_bank_distinct(self):
        with pytest.raises(ValueError):
            IdentityBank(np.zeros((3, 4)))


class TestAttention:
    def test_single_key(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(1, 3))
        out = attention(rng.normal(size=(5, 4)), rng.normal(size=(1, 4)), v)
        np.testing.assert_array_equal(out, np.repeat(v, 5, axis=0))

    def test_worked_example(self):
        out = attention(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[2.0], [4.0]]))
        e = math.exp(1 / math.sqrt(2))
        w1, w2 = e / (e + 1), 1 / (e + 1)
        assert out[0, 0] == pytest.approx(w1 * 2 + w2 * 4, abs=1e-12)

    def test_permutation(self):
        rng = np.random.default_rng(1)
        q, k, v = rng.normal(size=(4, 3)), rng.normal(size=(9, 3)), rng.normal(size=(9, 2))
        perm = rng.permutation(9)
        np.testing.assert_allclose(attention(q, k, v), attention(q, k[perm], v[perm]), atol=1e-12)

    def test_matches_naive(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            n, t, c, cv = rng.integers(1, 12, size=4)
            q, k, v = rng.normal(size=(n, c)), rng.normal(size=(t, c)), rng.normal(size=(t, cv))
            np.testing.assert_allclose(attention(q, k, v), naive_attention(q, k, v), atol=1e-9)

    def test_rows_and_hull(self):
        rng = np.random.default_rng(3)
        q, k, v = rng.normal(size=(7, 5)) * 4, rng.normal(size=(11, 5)) * 4, rng.normal(size=(11, 3))
        w = attention_weights(q, k)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
        out = attention(q, k, v)
        assert (out >= v.min(axis=0) - 1e-12).all() and (out <= v.max(axis=0) + 1e-12).all()

    def test_empty_memory(self):
        with pytest.raises(ValueError):
            attention(np.ones((2, 3)), np.ones((0, 3)), np.ones((0, 1)))

    def test_extreme_logits_finite(self):
        q = np.full((3, 4), 1e6)
        k = np.array([[1e6] * 4, [-1e6] * 4])
        out = attention(q, k, np.array([[1.0], [2.0]]))
        assert np.isfinite(out).all()


class TestGpmLayer:
    def _inputs(self, cfg, seed=0, n=6, t=10):
        rng = np.random.default_rng(seed)
        return (
            rng.normal(size=(n, cfg.vis_channels)),
            rng.normal(size=(n, cfg.id_channels)),
            rng.normal(size=(t, cfg.vis_channels)),
            rng.normal(size=(t, cfg.vis_channels)),
            rng.normal(size=(t, cfg.id_channels)),
        )

    def test_closed_gate_is_residual(self, cfg, params):
        layer = params.replace(
            gpm__16__0__gate_vis_bias=np.full(cfg.vis_channels, -1e4),
            gpm__16__0__gate_id_bias=np.full(cfg.id_channels, -1e4),
        ).layer(16, 0)
        vis, ids, mk, mv, mi = self._inputs(cfg)
        vis2, ids2 = gpm_layer(vis, ids, mk, mv, mi, layer)
        assert np.abs(vis2 - vis).max() < 1e-6
        assert np.abs(ids2 - ids).max() < 1e-6

    def test_hand_formula_self_memory(self, cfg, params):
        layer = params.layer(16, 1)
        rng = np.random.default_rng(4)
        vis = rng.normal(size=(5, cfg.vis_channels))
        mem_ids = rng.normal(size=(5, cfg.id_channels))
        ids = np.zeros((5, cfg.id_channels))
        _, ids2 = gpm_layer(vis, ids, vis, vis, mem_ids, layer)
        q = vis @ layer.query
        k = vis @ layer.key
        expected = np.zeros_like(ids)
        for i in range(5):
            scores = [float(q[i] @ k[j]) / math.sqrt(cfg.vis_channels) for j in range(5)]
            m = max(scores)
            w = [math.exp(s - m) for s in scores]
            msg = sum(w[j] / sum(w) * (mem_ids[j] @ layer.id_value) for j in range(5))
            gate = 1 / (1 + np.exp(-(vis[i] @ layer.gate_id + layer.gate_id_bias)))
            expected[i] = ids[i] + gate * msg
        np.testing.assert_allclose(ids2, expected, atol=1e-12)

    def test_memory_permutation(self, cfg, params):
        vis, ids, mk, mv, mi = self._inputs(cfg, seed=5, t=17)
        perm = np.random.default_rng(6).permutation(17)
        a = gpm_layer(vis, ids, mk, mv, mi, params.layer(8, 0))
        b = gpm_layer(vis, ids, mk[perm], mv[perm], mi[perm], params.layer(8, 0))
        np.testing.assert_allclose(a[0], b[0], atol=1e-12)
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)


def _memory(pyr, cfg, labels=None, bank=None):
    tracker = Tracker(cfg)
    tracker.bank = bank or IdentityBank.seeded(2, cfg.id_channels, 0)
    lm = labels or LabelMap.background(pyr.width, pyr.height, 2)
    mb = MemoryBank(cfg.memory_capacity, cfg.memory_gap)
    mb.initialize(tracker._entry(0, pyr, lm))
    return mb


class TestPropagate:
    def test_default_call_counts(self, cfg, params):
        img, _ = _scene()
        pyr = encode_frame(img, params)
        counter = Counter()
        propagate(pyr, _memory(pyr, cfg).gather(), params, counter)
        assert counter == Counter({16: 3, 8: 1})
        assert counter[4] == 0

    def test_zero_layers_pure_projection(self):
        cfg0 = TrackerConfig(gpm_layers_16=0, gpm_layers_8=0, vis_channels=5, id_channels=4)
        p = ModelParams.seeded(cfg0)
        img, _ = _scene()
        pyr = encode_frame(img, p)
        counter = Counter()
        out = propagate(pyr, _memory(pyr, cfg0).gather(), p, counter)
        assert sum(counter.values()) == 0
        assert np.array_equal(out.vis[16], pyr[16])
        assert not out.ids[16].any()
        v8 = pyr[8] + upsample_bilinear(pyr[16] @ p["cross.16_8.vis"], *pyr[8].shape[:2])
        np.testing.assert_array_equal(out.vis[8], v8)
        v4 = pyr[4] + upsample_bilinear(v8 @ p["cross.8_4.vis"], *pyr[4].shape[:2])
        np.testing.assert_array_equal(out.vis[4], v4)

    @pytest.mark.parametrize("h,w", [(32, 32), (48, 64), (40, 17), (100, 37)])
    def test_scale_arithmetic(self, cfg, params, h, w):
        img = np.random.default_rng(h * w).random((h, w))
        pyr = encode_frame(img, params)
        out = propagate(pyr, _memory(pyr, cfg).gather(), params)
        h16, w16 = scaled_dims(h, w, 16)
        h4, w4 = out.vis[4].shape[:2]
        assert (h4, w4) == scaled_dims(h, w, 4)
        assert h4 <= 4 * h16 and w4 <= 4 * w16
        if h % 16 == 0 and w % 16 == 0:
            assert (h4, w4) == (4 * h16, 4 * w16)

    def test_empty_memory(self, cfg, params):
        from trackforge.membank import MemoryView

        pyr = encode_frame(np.zeros((32, 32)), params)
        with pytest.raises(ValueError):
            propagate(pyr, MemoryView((), {}, {}, {}), params)


class TestDecode:
    def test_full_object(self):
        logits = np.zeros((2, 3, 4))
        logits[1] = 1.0
        assert (labels_from_logits(logits).labels == 1).all()

    def test_ties_go_high(self):
        assert (labels_from_logits(np.zeros((4, 3, 3))).labels == 3).all()

    def test_argmax_oracle(self):
        rng = np.random.default_rng(9)
        logits = rng.integers(0, 3, size=(3, 4, 4)).astype(float)
        labels = labels_from_logits(logits).labels
        for y in range(4):
            for x in range(4):
                best = max(range(3), key=lambda c: (logits[c, y, x], c))
                assert labels[y, x] == best

    def test_logit_shape(self, cfg, params):
        img, lm = _scene(48, 40)
        pyr = encode_frame(img, params)
        bank = IdentityBank.seeded(2, cfg.id_channels, 0)
        prop = propagate(pyr, _memory(pyr, cfg, lm, bank).gather(), params)
        logits = decode(prop, pyr, bank, params)
        assert logits.shape == (3, 48, 40)
        assert np.isfinite(logits).all()


class TestTracker:
    def _run(self, cfg, frames, annotation, bank=None):
        tr = Tracker(cfg, bank=bank)
        out = [tr.start(frames[0], annotation)]
        out += [tr.predict(f) for f in frames[1:]]
        return out, tr

    def test_frame0_is_annotation(self, cfg):
        img, lm = _scene()
        (fr,), _ = self._run(cfg, [img], lm)
        assert fr.labelmap == lm
        assert fr.frame_index == 0

    def test_deterministic(self, cfg):
        frames = [_scene(seed=s)[0] for s in range(4)]
        _, lm = _scene(seed=0)
        a, _ = self._run(cfg, frames, lm)
        b, _ = self._run(cfg, frames, lm)
        assert a == b

    def test_permutation_equivariance(self, cfg):
        frames = [_scene(seed=s, objects=3)[0] for s in range(4)]
        _, lm = _scene(seed=0, objects=3)
        perm = {1: 3, 2: 1, 3: 2}
        relabeled = np.zeros_like(lm.labels)
        for old, new in perm.items():
            relabeled[lm.labels == old] = new
        bank = IdentityBank.seeded(3, cfg.id_channels, cfg.seed)
        a, _ = self._run(cfg, frames, lm, bank)
        b, _ = self._run(cfg, frames, LabelMap(relabeled, 3), bank.permuted(perm))
        for fa, fb in zip(a, b):
            ma, mb = fa.masks, fb.masks
            for old, new in perm.items():
                assert ma[old - 1] == mb[new - 1]

    def test_call_counter_per_frame(self, cfg):
        frames = [_scene(seed=s)[0] for s in range(5)]
        _, tr = self._run(cfg, frames, _scene(seed=0)[1])
        assert tr.layer_calls == Counter({16: 3 * 4, 8: 4})

    def test_finite_outputs(self, cfg):
        frames = [np.ones((32, 32)), np.zeros((32, 32)), np.ones((32, 32))]
        lm = LabelMap(np.pad(np.ones((8, 8), dtype=int), ((0, 24), (0, 24))), 1)
        out, _ = self._run(cfg, frames, lm)
        assert all(np.isfinite(fr.confidences).all() for fr in out)

    def test_matching_init_tracks(self):
        cfg = TrackerConfig(init="matching", memory_gap=5)
        h = w = 128

        def scene(t):
            img = np.full((h, w), 0.2)
            lab = np.zeros((h, w), dtype=int)
            img[40:72, 20 + 2 * t : 52 + 2 * t] = 0.8
            lab[40:72, 20 + 2 * t : 52 + 2 * t] = 1
            return img, LabelMap(lab, 1)

        tr = Tracker(cfg)
        tr.start(*scene(0))
        from trackforge.maskcore import iou, split

        for t in range(1, 15):
            img, gt = scene(t)
            fr = tr.predict(img)
        assert iou(fr.masks[0], split(gt)[0]) > 0.6


def test_param_shapes_follow_layers():
    shapes = param_shapes(TrackerConfig(gpm_layers_16=2, gpm_layers_8=0))
    assert "gpm.16.1.query" in shapes and "gpm.16.2.query" not in shapes
    assert not any(name.startswith("gpm.8.") for name in shapes)


def test_params_reject_bad_shapes():
    cfg = TrackerConfig(vis_channels=4, id_channels=3)
    p = ModelParams.seeded(cfg)
    with pytest.raises(ValueError):
        p.replace(decoder__out=np.zeros((2, 2)))
    with pytest.raises(ValueError):
        ModelParams(cfg, {**dict(p), "bogus": np.zeros(1)})

import numpy as np
import pytest

from ifrvis import tensor as T
from ifrvis.decoder import (
    DecoderLayer,
    Heads,
    attention,
    decode_clip,
    ifr_frame_step,
    mask_logits,
    predict_classes,
    predict_masks,
    update_clip_queries,
)
from ifrvis.encoder import FeatureMap, FrameEncoder, encode_frame, positional_encoding
from ifrvis.model import IFRModel, ModelConfig
from ifrvis.tensor import Tensor

ATOL = 1e-12


def features(rng, h=4, w=4, d=8, lead=()):
    return FeatureMap(h, w, Tensor(rng.normal(size=lead + (h * w, d))))


class TestEncoder:
    def test_shape_contract(self, rng):
        enc = FrameEncoder(np.random.default_rng(0), dim=8)
        fm = encode_frame(enc, rng.random((16, 16, 3)))
        assert (fm.height, fm.width, fm.channels) == (4, 4, 8)
        assert fm.data.shape == (16, 8)
        assert np.all(np.isfinite(fm.data.data))

    def test_batched_shape(self, rng):
        enc = FrameEncoder(np.random.default_rng(0), dim=8)
        assert enc(rng.random((2, 3, 8, 12, 3))).data.shape == (2, 3, 6, 8)

    def test_divisibility(self):
        enc = FrameEncoder(np.random.default_rng(0), dim=8)
        with pytest.raises(ValueError):
            enc(np.zeros((10, 16, 3)))

    def test_zero_frames(self):
        enc = FrameEncoder(np.random.default_rng(0), dim=8)
        a = enc(np.zeros((16, 16, 3))).data.data
        b = enc(np.zeros((16, 16, 3))).data.data
        assert np.array_equal(a, b)
        # without input signal every position carries the same bias-only feature
        assert np.allclose(a, a[0], atol=ATOL)

    @pytest.mark.parametrize("kernel", [3, 5])
    def test_translation_by_four_pixels(self, kernel):
        enc = FrameEncoder(np.random.default_rng(1), dim=8, kernel=kernel)
        img = np.zeros((32, 32, 3))
        img[8:14, 10:15] = [0.9, 0.2, 0.4]
        shifted = np.roll(img, (4, 4), axis=(0, 1))
        a = enc(img).data.data.reshape(8, 8, 8)
        b = enc(shifted).data.data.reshape(8, 8, 8)
        np.testing.assert_allclose(b[2:7, 2:7], a[1:6, 1:6], atol=ATOL)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            FrameEncoder(np.random.default_rng(0), dim=8, kernel=4)

    def test_positional_encoding_shared_across_grids(self):
        pe = positional_encoding(4, 4, 8)
        assert pe.shape == (16, 8)
        assert np.all(np.abs(pe) <= 1.0)
        assert np.array_equal(pe, positional_encoding(4, 4, 8))


class TestAttention:
    def test_zero_query_gives_column_mean(self, rng):
        k, v = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(5, 4)))
        out = attention(Tensor(np.zeros((3, 4))), k, v, heads=2).data
        np.testing.assert_allclose(out, np.tile(v.data.mean(axis=0), (3, 1)), atol=ATOL)

    def test_single_admitted_key(self, rng):
        q, k, v = (Tensor(rng.normal(size=s)) for s in [(3, 4), (5, 4), (5, 4)])
        mask = np.zeros((3, 5), bool)
        mask[:, 2] = True
        np.testing.assert_allclose(attention(q, k, v, 2, mask).data, np.tile(v.data[2], (3, 1)), atol=ATOL)

    def test_hand_computed(self):
        q = np.array([[1.0, 0.0], [0.5, -1.0]])
        k = np.array([[0.0, 2.0], [1.0, 1.0]])
        v = np.array([[1.0, 2.0], [-3.0, 4.0]])
        expected = []
        for row in q:
            s = np.array([row @ k[0], row @ k[1]]) / np.sqrt(2.0)
            w = np.exp(s) / np.exp(s).sum()
            expected.append(w[0] * v[0] + w[1] * v[1])
        out = attention(Tensor(q), Tensor(k), Tensor(v), heads=1).data
        np.testing.assert_allclose(out, np.array(expected), atol=ATOL)

    def test_masked_rows_sum_to_one(self, rng):
        q, k = Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(6, 6)))
        mask = rng.random((3, 6)) > 0.5
        mask[:, 0] = True
        # identity values expose the attention weights as the output rows
        w = attention(q, k, Tensor(np.eye(6)), 1, mask).data
        assert np.all(w[~mask] == 0.0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=ATOL)

    def test_all_masked_row(self, rng):
        q, k, v = (Tensor(rng.normal(size=(2, 4))) for _ in range(3))
        mask = np.array([[True, True], [False, False]])
        with pytest.raises(T.DegenerateRowError):
            attention(q, k, v, 2, mask)

    def test_heads_must_divide(self, rng):
        x = Tensor(rng.normal(size=(2, 6)))
        with pytest.raises(ValueError):
            attention(x, x, x, heads=4)


class TestIFRStep:
    def setup_method(self):
        self.layer = DecoderLayer(np.random.default_rng(3), 8, 2)

    def test_shapes_and_intermediate(self, rng, monkeypatch):
        clip_q, prev = Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(5, 8)))
        seen = {}
        orig = self.layer.frame_self.__class__.__call__

        def spy(block, x, memory, mask=None):
            if block is self.layer.frame_self:
                seen["rows"] = x.shape[0]
            return orig(block, x, memory, mask)

        monkeypatch.setattr(self.layer.frame_self.__class__, "__call__", spy)
        out = ifr_frame_step(self.layer, clip_q, prev, features(rng))
        assert out.shape == (5, 8)
        assert seen["rows"] == 10

    def test_copy_init_gives_identical_halves(self, rng):
        clip_q = Tensor(rng.normal(size=(4, 8)))
        fm = features(rng)
        stacked = self.layer.cross(T.concat_rows(clip_q, clip_q), fm.data)
        top, bottom = T.chunk_rows(stacked, 2)
        assert np.array_equal(top.data, bottom.data)

    def test_query_permutation_equivariance(self, rng):
        clip_q, prev = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
        fm = features(rng)
        sigma = rng.permutation(6)
        a = ifr_frame_step(self.layer, Tensor(clip_q), Tensor(prev), fm).data
        b = ifr_frame_step(self.layer, Tensor(clip_q[sigma]), Tensor(prev[sigma]), fm).data
        np.testing.assert_allclose(b, a[sigma], atol=ATOL, rtol=0)

    def test_ablated_branch_ignores_previous_queries(self, rng):
        clip_q = Tensor(rng.normal(size=(4, 8)))
        fm = features(rng)
        a = self.layer.frame_step(clip_q, Tensor(rng.normal(size=(4, 8))), fm, recurrent=False).data
        b = self.layer.frame_step(clip_q, Tensor(rng.normal(size=(4, 8))), fm, recurrent=False).data
        assert np.array_equal(a, b)

    def test_shape_mismatch(self, rng):
        with pytest.raises(T.ShapeError):
            ifr_frame_step(self.layer, Tensor(np.ones((4, 8))), Tensor(np.ones((3, 8))), features(rng))


class TestClipUpdate:
    def setup_method(self):
        self.layer = DecoderLayer(np.random.default_rng(4), 8, 2)

    def test_single_frame_deterministic(self, rng):
        q = Tensor(rng.normal(size=(4, 8)))
        a = update_clip_queries(self.layer, q, q).data
        b = update_clip_queries(self.layer, Tensor(q.data.copy()), Tensor(q.data.copy())).data
        assert a.shape == (4, 8) and np.array_equal(a, b)

    def test_frame_block_permutation_invariance(self, rng):
        q = Tensor(rng.normal(size=(4, 8)))
        blocks = [rng.normal(size=(4, 8)) for _ in range(3)]
        a = update_clip_queries(self.layer, q, Tensor(np.concatenate(blocks))).data
        b = update_clip_queries(self.layer, q, Tensor(np.concatenate(blocks[::-1]))).data
        np.testing.assert_allclose(a, b, atol=ATOL, rtol=0)


class TestDecodeClip:
    def setup_method(self):
        r = np.random.default_rng(5)
        self.layers = [DecoderLayer(r, 8, 2) for _ in range(2)]

    def test_single_frame_single_layer(self, rng):
        q = Tensor(rng.normal(size=(3, 8)))
        res = decode_clip(self.layers[:1], [features(rng)], q)
        assert res.clip_queries.shape == (3, 8)
        assert len(res.frame_queries) == 1 and res.frame_queries[0].shape == (3, 8)
        assert len(res.layers) == 1

    def test_deterministic(self, rng):
        q = Tensor(rng.normal(size=(3, 8)))
        fms = [features(rng) for _ in range(3)]
        a, b = decode_clip(self.layers, fms, q), decode_clip(self.layers, fms, q)
        assert np.array_equal(a.clip_queries.data, b.clip_queries.data)
        for x, y in zip(a.frame_queries, b.frame_queries):
            assert np.array_equal(x.data, y.data)

    def test_frame_order_matters(self, rng):
        q = Tensor(rng.normal(size=(3, 8)))
        fms = [features(rng) for _ in range(3)]
        fwd = decode_clip(self.layers, fms, q)
        rev = decode_clip(self.layers, fms[::-1], q)
        assert not np.allclose(fwd.frame_queries[1].data, rev.frame_queries[1].data)

    def test_query_permutation_equivariance(self, rng):
        q = rng.normal(size=(5, 8))
        fms = [features(rng) for _ in range(3)]
        sigma = rng.permutation(5)
        a = decode_clip(self.layers, fms, Tensor(q))
        b = decode_clip(self.layers, fms, Tensor(q[sigma]))
        np.testing.assert_allclose(b.clip_queries.data, a.clip_queries.data[sigma], atol=ATOL, rtol=0)
        for x, y in zip(a.frame_queries, b.frame_queries):
            np.testing.assert_allclose(y.data, x.data[sigma], atol=ATOL, rtol=0)

    def test_empty_inputs(self, rng):
        q = Tensor(rng.normal(size=(3, 8)))
        with pytest.raises(ValueError):
            decode_clip(self.layers, [], q)
        with pytest.raises(ValueError):
            decode_clip([], [features(rng)], q)

    def test_layer_count(self, rng):
        res = decode_clip(self.layers, [features(rng)] * 2, Tensor(rng.normal(size=(3, 8))))
        assert len(res.layers) == 2 and res.layers[-1].clip_queries is res.clip_queries


class TestHeads:
    def setup_method(self):
        self.heads = Heads(np.random.default_rng(6), 8, 3)

    def test_zero_kernel_gives_half(self, rng):
        probs = T.sigmoid(mask_logits(Tensor(np.zeros((2, 8))), Tensor(rng.normal(size=(16, 8))))).data
        assert np.all(probs == 0.5)

    def test_mask_shape(self, rng):
        assert predict_masks(self.heads, Tensor(rng.normal(size=(5, 8))), features(rng, 3, 4)).shape == (5, 3, 4)

    def test_hand_dot_products(self):
        k = Tensor([[1.0, 2.0]])
        f = Tensor([[3.0, -1.0], [0.5, 0.25]])
        assert mask_logits(k, f).data.tolist() == [[1.0, 1.0]]

    def test_channel_mismatch(self, rng):
        with pytest.raises(T.ShapeError):
            mask_logits(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 5))))

    def test_zero_final_layer_gives_half(self, rng):
        last = self.heads.class_head.layers[-1]
        last.weight.data[:] = 0.0
        last.bias.data[:] = 0.0
        assert np.all(predict_classes(self.heads, Tensor(rng.normal(size=(4, 8)))).data == 0.5)

    def test_probabilities_open_interval(self, rng):
        p = predict_classes(self.heads, Tensor(rng.normal(size=(4, 8)))).data
        assert p.shape == (4, 3) and np.all((p > 0) & (p < 1))

    def test_monotone_in_own_logit(self, rng):
        q = Tensor(rng.normal(size=(2, 8)))
        base = predict_classes(self.heads, q).data
        self.heads.class_head.layers[-1].bias.data[1] += 0.5
        bumped = predict_classes(self.heads, q).data
        assert np.all(bumped[:, 1] > base[:, 1])
        assert np.array_equal(bumped[:, [0, 2]], base[:, [0, 2]])

    def test_head_depths(self):
        assert [l.weight.shape for l in self.heads.class_head.layers] == [(8, 8), (8, 8), (8, 3)]
        assert [l.weight.shape for l in self.heads.kernel_head.layers] == [(8, 8), (8, 8), (8, 8)]


class TestModel:
    def test_output_shapes(self, rng):
        cfg = ModelConfig(queries=4, dim=8, heads=2, layers=2)
        out = IFRModel(cfg)(rng.random((2, 3, 16, 16, 3)))
        assert len(out.layers) == 2
        assert out.final.class_logits.shape == (2, 4, 3)
        assert out.final.kernels.shape == (2, 3, 4, 8)
        assert out.features.shape == (2, 3, 16, 8)

    def test_batch_rows_independent(self, rng):
        m = IFRModel(ModelConfig(queries=4, dim=8, heads=2, layers=1))
        frames = rng.random((2, 2, 16, 16, 3))
        both = m(frames).final.kernels.data
        one = m(frames[1:]).final.kernels.data
        np.testing.assert_allclose(both[1:], one, atol=ATOL)

    def test_seeded_init(self):
        a = IFRModel(ModelConfig(dim=8, heads=2, seed=3)).state_dict()
        b = IFRModel(ModelConfig(dim=8, heads=2, seed=3)).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    @pytest.mark.parametrize("bad", [dict(dim=10, heads=4), dict(encoder_kernel=2), dict(queries=0)])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            ModelConfig(**bad)

    def test_encoder_parameter_names(self):
        m = IFRModel(ModelConfig(dim=8, heads=2, layers=1))
        names = m.encoder_parameter_names()
        assert names and all(n.startswith("encoder.") for n in names)
        assert "query_embed" not in names

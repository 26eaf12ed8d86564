import math

import numpy as np
import pytest
from conftest import randomize

from chartrans import model as M
from chartrans import tensor as T
from chartrans.errors import ConfigError, DataError, DimensionError
from chartrans.tokenize import BOS, EOS, PAD, collate
from chartrans.train import nll_loss

pytestmark = pytest.mark.usefixtures("double")


def micro(mode="char-reduction-transformer", **kw):
    base = dict(mode=mode, src_vocab=12, tgt_vocab=10, enc_emb=8, d_model=8, heads=2, d_ff=16,
                enc_layers=2, dec_layers=2, conv_filters={1: 2, 2: 2}, pool_stride=2, highway_layers=2)
    base.update(kw)
    return M.ModelConfig(**base)


def micro_batch(stride, seed=0, B=2):
    r = np.random.default_rng(seed)
    pairs = []
    for _ in range(B):
        s = list(r.integers(4, 12, size=r.integers(2, 6))) + [EOS]
        t = list(r.integers(4, 10, size=r.integers(1, 5))) + [EOS]
        pairs.append((s, t))
    return collate(pairs, stride)


class TestConfig:
    def test_full_filters(self):
        cfg = M.ModelConfig.full("char-reduction-transformer")
        assert cfg.conv_filters == {1: 200, 2: 200, 3: 250, 4: 250, 5: 300, 6: 300, 7: 300, 8: 300}
        assert cfg.conv_channels == 2100
        assert (cfg.enc_emb, cfg.d_model, cfg.heads, cfg.d_ff, cfg.enc_layers, cfg.dec_layers,
                cfg.pool_stride, cfg.highway_layers, cfg.dropout) == (128, 512, 8, 2048, 6, 6, 5, 2, 0.0)

    def test_non_reduction_has_no_filters(self):
        cfg = M.ModelConfig.full("char-transformer")
        assert cfg.conv_filters == {} and cfg.pool_stride == 1 and cfg.enc_emb == 512

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            M.ModelConfig(d_model=10, heads=3)

    def test_record_round_trip(self):
        cfg = micro()
        assert M.ModelConfig.from_record(cfg.to_record()) == cfg


class TestGlorot:
    def test_bound(self):
        w = M.glorot_init((512, 512), np.random.default_rng(0)).data
        a = math.sqrt(6 / 1024)
        assert a == pytest.approx(0.0765, abs=1e-4)
        assert np.abs(w).max() <= a and np.abs(w).max() > 0.99 * a

    def test_conv_fan_in(self):
        w = M.glorot_init((3, 4, 5), np.random.default_rng(0)).data
        assert np.abs(w).max() <= math.sqrt(6 / (12 + 5))

    def test_deterministic(self):
        a = M.glorot_init((4, 4), np.random.default_rng(7)).data
        b = M.glorot_init((4, 4), np.random.default_rng(7)).data
        assert np.array_equal(a, b)

    def test_zero_dim(self):
        with pytest.raises(DimensionError):
            M.glorot_init((0, 3), np.random.default_rng(0))

    def test_init_rules(self):
        p = M.init_params(micro())
        assert np.all(p["enc.hw0.bt"].data == -2)
        assert np.all(p["enc.layer0.ln1.g"].data == 1)
        assert np.all(p["dec.out.b"].data == 0)


class TestPositional:
    def test_first_row(self):
        pe = M.positional_encoding(3, 6).data
        np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1])
        assert pe[1, 0] == pytest.approx(math.sin(1))

    def test_range(self):
        assert np.abs(M.positional_encoding(512, 64).data).max() <= 1

    def test_odd(self):
        with pytest.raises(DataError):
            M.positional_encoding(3, 5)


class TestHighway:
    def params(self, D, rng, bt=0.0):
        return {"wh": T.Tensor(rng.standard_normal((D, D)), requires_grad=True),
                "bh": T.Tensor(rng.standard_normal(D), requires_grad=True),
                "wt": T.Tensor(rng.standard_normal((D, D)), requires_grad=True),
                "bt": T.Tensor(np.full(D, bt), requires_grad=True)}

    def test_carry_limit(self, rng):
        x = T.Tensor(rng.standard_normal((3, 4)))
        p = self.params(4, rng, bt=-1e3)
        np.testing.assert_allclose(M.highway_forward(x, p).data, x.data, atol=1e-12)

    def test_half_gate_identity(self, rng):
        x = T.Tensor(np.abs(rng.standard_normal((3, 4))))
        p = {"wh": T.Tensor(np.eye(4)), "bh": T.Tensor(np.zeros(4)),
             "wt": T.Tensor(np.zeros((4, 4))), "bt": T.Tensor(np.zeros(4))}
        np.testing.assert_allclose(M.highway_forward(x, p).data, x.data, atol=1e-15)

    def test_gradient(self, rng):
        p = self.params(4, rng)
        x = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        assert T.finite_diff_check(lambda v: M.highway_forward(v, p), x) < 1e-6
        for name in p:
            assert T.finite_diff_check(lambda _: M.highway_forward(x, p), p[name]) < 1e-6

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            M.highway_forward(T.Tensor(np.zeros((2, 3))), self.params(4, rng))


class TestReduction:
    @pytest.mark.parametrize("L", [5, 45, 450])
    def test_shape_law(self, L):
        cfg = M.ModelConfig.desk("char-reduction-transformer", 20, 20)
        p = M.init_params(cfg)
        ids = np.full((1, L), 5)
        out, mask = M.reduce_source(ids, p, cfg)
        assert out.shape == (1, L // 5, cfg.d_model) and mask.shape == (1, L // 5)

    def test_full_channels(self):
        cfg = M.ModelConfig.full("char-reduction-transformer")
        shapes = dict((n, s) for n, s, _ in M.param_shapes(cfg))
        assert shapes["enc.hw0.wh"] == (2100, 2100)
        assert shapes["enc.proj.w"] == (2100, 512)

    def test_all_pad_window_masked(self):
        mask = np.array([[False, True, True, True, True, True, True, True, True, True]])
        assert M.reduce_pad_mask(mask, 5).tolist() == [[False, True]]

    def test_indivisible(self):
        cfg = micro()
        with pytest.raises(DataError):
            M.reduce_source(np.full((1, 5), 4), M.init_params(cfg), cfg)

    def test_projection_count(self):
        cfg = M.ModelConfig.full("char-reduction-transformer")
        shapes = dict((n, s) for n, s, _ in M.param_shapes(cfg))
        assert np.prod(shapes["enc.proj.w"]) + np.prod(shapes["enc.proj.b"]) == 2100 * 512 + 512


class TestAttention:
    def params(self, D, rng):
        p = {}
        for n in "qvo":
            p["w" + n] = T.Tensor(rng.standard_normal((D, D)))
            p["b" + n] = T.Tensor(rng.standard_normal(D))
        p["wk"] = T.Tensor(rng.standard_normal((D, D)))
        return p

    def test_single_position(self, rng):
        p = self.params(4, rng)
        x = T.Tensor(rng.standard_normal((1, 1, 4)))
        out = M.multihead_attention(x, x, x, None, 2, p)
        expected = (x.data @ p["wv"].data + p["bv"].data) @ p["wo"].data + p["bo"].data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_forced_position(self, rng):
        p = self.params(4, rng)
        x = T.Tensor(rng.standard_normal((1, 3, 4)))
        mask = np.array([True, False, True])[None, None, None, :]
        _, w = M.multihead_attention(x, x, x, mask, 2, p, return_weights=True)
        np.testing.assert_array_equal(w.data[..., 1], 1.0)

    def test_rows_sum_to_one(self, rng):
        p = self.params(4, rng)
        x = T.Tensor(rng.standard_normal((2, 5, 4)))
        _, w = M.multihead_attention(x, x, x, M.causal_mask(5)[None, None], 2, p, return_weights=True)
        assert np.max(np.abs(w.data.sum(-1) - 1)) < 1e-12

    def test_mask_shape(self, rng):
        p = self.params(4, rng)
        x = T.Tensor(rng.standard_normal((1, 3, 4)))
        with pytest.raises(DimensionError):
            M.multihead_attention(x, x, x, np.zeros((1, 1, 1, 4), bool), 2, p)


def full_loss(batch, params, cfg):
    logits = M.forward(batch, params, cfg)
    loss, _ = nll_loss(logits, batch.tgt_ids[:, 1:], batch.tgt_pad_mask[:, 1:], 0.1)
    return loss


@pytest.mark.parametrize("mode", M.MODES)
def test_full_model_gradient(mode):
    cfg = micro(mode)
    params = randomize(M.init_params(cfg), seed=3)
    batch = micro_batch(cfg.pool_stride, seed=1)
    worst = 0.0
    for name, p in params.items():
        worst = max(worst, T.finite_diff_check(lambda _: full_loss(batch, params, cfg), p, coords=6))
    assert worst < 1e-4


def test_encoder_gradient():
    cfg = micro("char-transformer")
    params = randomize(M.init_params(cfg), seed=4)
    x = T.Tensor(np.random.default_rng(0).standard_normal((2, 3, 8)), requires_grad=True)
    mask = np.array([[False, False, True], [False, False, False]])
    assert T.finite_diff_check(lambda v: M.encoder_forward(v, mask, params, cfg).states, x) < 1e-4


def perturbation_configs(n=50):
    r = np.random.default_rng(2024)
    for i in range(n):
        mode = M.MODES[i % 3]
        heads = int(r.choice([1, 2, 4]))
        d = heads * int(r.choice([2, 4]))
        yield i, micro(mode, d_model=d, heads=heads, enc_emb=int(r.choice([4, 6])),
                       enc_layers=int(r.integers(1, 3)), dec_layers=int(r.integers(1, 3)),
                       pool_stride=int(r.choice([2, 3, 5])), d_ff=2 * d)


def check_causality(cfg, seed):
    r = np.random.default_rng(seed)
    params = randomize(M.init_params(cfg, seed), seed)
    src = np.concatenate([r.integers(4, cfg.src_vocab, size=(2, 2 * cfg.pool_stride - 1)),
                          np.full((2, 1), EOS)], axis=1)
    enc = M.encode_source(src, params, cfg)
    tgt = np.concatenate([np.full((2, 1), BOS), r.integers(4, cfg.tgt_vocab, size=(2, 5))], axis=1)
    base = M.decoder_forward(tgt, enc, params, cfg).data
    for t in range(tgt.shape[1] - 1):
        alt = tgt.copy()
        alt[:, t + 1:] = r.integers(4, cfg.tgt_vocab, size=alt[:, t + 1:].shape)
        out = M.decoder_forward(alt, enc, params, cfg).data
        if not np.array_equal(out[:, :t + 1], base[:, :t + 1]):
            return False
    return True


def check_pad_isolation(cfg, seed):
    r = np.random.default_rng(seed)
    params = randomize(M.init_params(cfg, seed), seed)
    s = cfg.pool_stride
    src = np.full((2, 4 * s), PAD)
    src[0, :s + 1] = r.integers(4, cfg.src_vocab, size=s + 1)
    src[1, :3 * s] = r.integers(4, cfg.src_vocab, size=3 * s)
    base = M.encode_source(src, params, cfg)
    # perturb what the model sees at PAD positions: the PAD embedding row
    params["enc.emb"].data[PAD] += r.standard_normal(params["enc.emb"].shape[1]) * 5
    moved = M.encode_source(src, params, cfg)
    keep = ~base.pad_mask
    if not np.array_equal(moved.states.data[keep], base.states.data[keep]):
        return False
    # and the embedded encoder input itself at masked positions
    x = T.Tensor(r.standard_normal((2, 4, cfg.d_model)))
    mask = np.array([[False, False, True, True], [False, True, True, True]])
    a = M.encoder_forward(x, mask, params, cfg).states.data
    x.data[mask] = r.standard_normal((int(mask.sum()), cfg.d_model)) * 10
    b = M.encoder_forward(x, mask, params, cfg).states.data
    return np.array_equal(a[~mask], b[~mask])


@pytest.mark.parametrize("i,cfg", list(perturbation_configs(50)))
def test_causality(i, cfg):
    assert check_causality(cfg, i)


@pytest.mark.parametrize("i,cfg", list(perturbation_configs(50)))
def test_pad_isolation(i, cfg):
    assert check_pad_isolation(cfg, i)


def test_permutation_equivariance():
    cfg = micro("char-transformer")
    params = randomize(M.init_params(cfg), 5)
    x = np.random.default_rng(0).standard_normal((1, 5, 8))
    perm = np.array([3, 0, 4, 1, 2])
    mask = np.zeros((1, 5), bool)
    a = M.encoder_forward(T.Tensor(x), mask, params, cfg).states.data
    b = M.encoder_forward(T.Tensor(x[:, perm]), mask, params, cfg).states.data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


class TestForward:
    def test_reduction_runs_over_fifth(self):
        cfg = M.ModelConfig.desk("char-reduction-transformer", 20, 20)
        enc = M.encode_source(np.full((1, 450), 5), M.init_params(cfg), cfg)
        assert enc.states.shape == (1, 90, cfg.d_model)

    def test_char_transformer_full_length(self):
        cfg = M.ModelConfig.desk("char-transformer", 20, 20)
        enc = M.encode_source(np.full((1, 450), 5), M.init_params(cfg), cfg)
        assert enc.states.shape == (1, 450, cfg.d_model)

    def test_deterministic(self):
        cfg = micro()
        batch = micro_batch(cfg.pool_stride)
        a = M.forward(batch, M.init_params(cfg, 9), cfg).data
        b = M.forward(batch, M.init_params(cfg, 9), cfg).data
        assert np.array_equal(a, b)
        assert a.shape == (batch.size, batch.tgt_ids.shape[1] - 1, cfg.tgt_vocab)

    def test_mode_mismatch(self):
        cfg = micro()
        batch = collate([([4, 5, EOS], [6, EOS])], stride=1)  # built for a non-reducing model
        with pytest.raises(DataError):
            M.forward(batch, M.init_params(cfg), cfg)


class TestCount:
    def test_single(self):
        assert M.count_params({"w": T.Tensor(np.zeros((2, 3)))}) == 6

    def test_micro_hand_sum(self):
        cfg = micro()
        D, F, V, S = 8, 16, 10, 12
        attn = 4 * D * D + 3 * D
        ln = 2 * D
        ffn = D * F + F + F * D + D
        conv = (1 * 8 * 2 + 2) + (2 * 8 * 2 + 2)
        hw = 2 * (2 * 4 * 4 + 2 * 4)
        enc = S * 8 + conv + hw + (4 * D + D) + 2 * (attn + ffn + 2 * ln)
        dec = V * D + 2 * (2 * attn + ffn + 3 * ln) + D * V + V
        assert M.count_params(M.init_params(cfg)) == enc + dec

import itertools

import numpy as np
import pytest

from chartrans import model as M
from chartrans.decode import (BPE_BEAM, CHAR_BEAM, beam_search, decode_max_len, default_beam,
                              detokenize, greedy_decode)
from chartrans.errors import DataError
from chartrans.tokenize import BOS, EOS, PAD, SPECIALS, UNK, Vocab, build_char_vocab, encode


class TableModel:
    """Next-token distribution drawn from a hash of the prefix; no neural network involved."""

    def __init__(self, V, seed, temperature=2.0):
        self.V, self.seed, self.temperature = V, seed, temperature

    def encode(self, src):
        return tuple(src)

    def dist(self, prefix):
        r = np.random.default_rng([self.seed, *[int(t) for t in prefix]])
        z = r.standard_normal(self.V) * self.temperature
        z[[PAD, BOS]] = -np.inf
        return z - np.log(np.exp(z[np.isfinite(z)]).sum())

    def log_probs(self, enc, prefixes):
        return np.stack([self.dist(p) for p in prefixes])


class DictModel:
    """Explicit next-token probabilities keyed by prefix (without BOS)."""

    def __init__(self, V, table):
        self.V, self.table = V, table

    def encode(self, src):
        return None

    def log_probs(self, enc, prefixes):
        out = []
        for p in prefixes:
            probs = np.full(self.V, 1e-12)
            for tok, pr in self.table.get(tuple(int(t) for t in p[1:]), {EOS: 1.0}).items():
                probs[tok] = pr
            out.append(np.log(probs / probs.sum()))
        return np.stack(out)


def sequence_logprob(model, tokens):
    """Log-probability of BOS + tokens, tokens including the closing EOS if any."""
    seq, total = [BOS], 0.0
    for t in tokens:
        total += model.log_probs(None, np.array([seq]))[0][t]
        seq.append(t)
    return total


def brute_force(model, max_len):
    """Exhaustive argmax over every sequence beam search can return.

    That is ``n < max_len`` body tokens closed by EOS, or ``max_len`` body
    tokens cut off by the length cap.
    """
    body = [t for t in range(model.V) if t not in (PAD, BOS, EOS)]
    cands = [list(mid) + [EOS] for n in range(max_len) for mid in itertools.product(body, repeat=n)]
    cands += [list(mid) for mid in itertools.product(body, repeat=max_len)]
    scored = [(sequence_logprob(model, c), c) for c in cands]
    lp, seq = max(scored, key=lambda x: x[0])
    return [t for t in seq if t != EOS], lp


class TestBeamSearch:
    def test_defaults(self):
        assert CHAR_BEAM == 20 and BPE_BEAM == 5
        assert default_beam("char") == 20 and default_beam("bpe") == 5

    def test_beats_greedy_on_hand_distribution(self):
        # greedy takes 4 (0.6) and then faces a flat continuation; 5 (0.4) leads to a sure path
        m = DictModel(8, {(): {4: 0.6, 5: 0.4},
                          (4,): {6: 0.34, 7: 0.33, EOS: 0.33}, (5,): {6: 0.99, EOS: 0.01},
                          (4, 6): {EOS: 1.0}, (4, 7): {EOS: 1.0}, (5, 6): {EOS: 1.0}})
        assert greedy_decode([EOS], m, 3) == [4, 6]
        assert beam_search([EOS], m, 2, 3) == [5, 6]
        assert brute_force(m, 3)[0] == [5, 6]

    @pytest.mark.parametrize("seed", range(40))
    def test_exhaustive_beam_is_exact(self, seed):
        V = 4 + seed % 2
        max_len = 1 + seed % 4
        m = TableModel(V, seed)
        seq, lp = brute_force(m, max_len)
        hyp = beam_search([EOS], m, V ** max_len, max_len, return_hypothesis=True)
        assert [t for t in hyp.tokens[1:] if t != EOS] == seq
        assert hyp.logprob == pytest.approx(lp, abs=1e-12)

    @pytest.mark.parametrize("seed", range(60))
    def test_never_worse_than_greedy(self, seed):
        m = TableModel(7, 1000 + seed, temperature=1.0)
        g = greedy_decode([EOS], m, 6)
        g_lp = sequence_logprob(m, g + ([EOS] if len(g) < 6 else []))
        for k in (1, 2, 3, 5):
            hyp = beam_search([EOS], m, k, 6, return_hypothesis=True)
            assert hyp.logprob >= g_lp - 1e-12

    def test_beam_one_is_greedy(self):
        for seed in range(30):
            m = TableModel(9, seed)
            assert beam_search([EOS], m, 1, 8) == greedy_decode([EOS], m, 8)

    def test_output_has_no_specials(self):
        for seed in range(20):
            out = beam_search([EOS], TableModel(6, seed), 3, 5)
            assert not {BOS, EOS, PAD} & set(out)

    def test_deterministic(self):
        m = TableModel(9, 3)
        assert beam_search([EOS], m, 4, 8) == beam_search([EOS], m, 4, 8)

    def test_length_normalisation_prefers_longer(self):
        m = DictModel(8, {(): {EOS: 0.4, 4: 0.6}, (4,): {5: 0.6, EOS: 0.4}, (4, 5): {EOS: 1.0}})
        assert beam_search([EOS], m, 3, 4, alpha=0.0) == []
        assert beam_search([EOS], m, 3, 4, alpha=1.0) == [4, 5]

    def test_bad_arguments(self):
        with pytest.raises(DataError):
            beam_search([EOS], TableModel(5, 0), 0, 3)
        with pytest.raises(DataError):
            greedy_decode([EOS], TableModel(5, 0), 0)


class TestGreedy:
    def test_stops_at_eos(self):
        m = DictModel(6, {(): {4: 0.9, EOS: 0.1}, (4,): {EOS: 0.9, 5: 0.1}})
        assert greedy_decode([EOS], m, 10) == [4]

    def test_max_len(self):
        m = DictModel(6, {(): {4: 1.0}, (4,): {4: 1.0}, (4, 4): {4: 1.0}})
        assert greedy_decode([EOS], m, 3) == [4, 4, 4]

    def test_ties_go_to_lowest_id(self):
        m = DictModel(7, {(): {5: 0.5, 4: 0.5}})
        assert greedy_decode([EOS], m, 1) == [4]

    def test_equals_beam_one_on_micro_model(self):
        cfg = M.ModelConfig(mode="char-reduction-transformer", src_vocab=10, tgt_vocab=8, enc_emb=4,
                            d_model=8, heads=2, d_ff=16, enc_layers=1, dec_layers=1,
                            conv_filters={1: 2, 2: 2}, pool_stride=2, highway_layers=1)
        model = M.Seq2Seq(cfg, M.init_params(cfg, 5))
        r = np.random.default_rng(0)
        for _ in range(100):
            src = list(r.integers(4, 10, size=r.integers(0, 6))) + [EOS]
            assert greedy_decode(src, model, 6) == beam_search(src, model, 1, 6)


class TestDetokenize:
    def test_char(self):
        v = build_char_vocab(["a b"])
        assert detokenize(encode("a b", "char", v), "char", v) == "a b"

    def test_bpe_markers(self):
        assert detokenize(["lo", "w</w>", "it</w>"], "bpe", None) == "low it"

    def test_unk(self):
        v = Vocab(list(SPECIALS) + ["a"])
        assert detokenize([4, UNK, 4], "char", v) == "a⁇a"


class TestMaxLen:
    def test_values(self):
        assert decode_max_len(450, "char") == 500
        assert decode_max_len(10, "char") == 30
        assert decode_max_len(50, "bpe") == 60
        assert decode_max_len(0, "bpe") == 10

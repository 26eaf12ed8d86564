from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chartrans.decode import detokenize
from chartrans.errors import DataError
from chartrans.tokenize import (BOS, EOS, PAD, SPECIALS, UNK, BpeMerges, BpeSegmenter, Vocab,
                                apply_bpe, build_char_vocab, build_token_vocab, encode,
                                filter_corpus, learn_bpe, make_batches, pretokenize,
                                read_parallel)


def naive_bpe(corpus, num_ops):
    """Textbook BPE: recount every pair from scratch after each merge."""
    vocab = Counter()
    for line in corpus:
        for w in line.split():
            vocab[tuple(w[:-1]) + (w[-1] + "</w>",)] += 1
    merges = []
    for _ in range(num_ops):
        pairs = Counter()
        for syms, f in vocab.items():
            for p in zip(syms, syms[1:]):
                pairs[p] += f
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        if pairs[best] < 2:
            break
        merges.append(best)
        new = Counter()
        for syms, f in vocab.items():
            out, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == best:
                    out.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            new[tuple(out)] += f
        vocab = new
    return tuple(merges)


class TestCharVocab:
    def test_two_letters(self):
        v = build_char_vocab(["ab", "ba"], 300)
        assert v.id_to_token == list(SPECIALS) + ["a", "b"]

    def test_truncation_keeps_most_frequent(self):
        v = build_char_vocab(["aaabbc" + "defghij"], 6)
        assert len(v) == 6
        assert v.token(4) == "a" and v.token(5) == "b"
        assert v.id("c") == UNK

    def test_ties_by_code_point(self):
        v = build_char_vocab(["zyx"], 300)
        assert v.id_to_token[4:] == ["x", "y", "z"]

    def test_space_is_a_character(self):
        assert " " in build_char_vocab(["a b"])

    def test_default_size_cap(self):
        text = "".join(chr(0x100 + i) for i in range(400))
        assert len(build_char_vocab([text])) == 300

    def test_empty_corpus(self):
        with pytest.raises(DataError):
            build_char_vocab([])

    def test_too_small(self):
        with pytest.raises(DataError):
            build_char_vocab(["ab"], 4)


class TestVocabFile:
    def test_round_trip_with_escapes(self, tmp_path):
        v = Vocab(list(SPECIALS) + ["a", "\n", "\t", "\\", "\\n"])
        v.save(tmp_path / "v.txt")
        assert Vocab.load(tmp_path / "v.txt") == v
        assert len((tmp_path / "v.txt").read_text(encoding="utf-8").split("\n")) == len(v) + 1

    def test_duplicates_rejected(self):
        with pytest.raises(DataError):
            Vocab(list(SPECIALS) + ["a", "a"])


class TestLearnBpe:
    def test_zero_ops(self):
        assert learn_bpe(["low"], 0).merges == ()

    def test_first_merge(self):
        assert learn_bpe(["low low low", "lower"], 1).merges == (("l", "o"),)

    def test_stops_early(self):
        m = learn_bpe(["low low low", "lower"], 20000)
        assert 0 < m.count < 20000
        assert m.merges == naive_bpe(["low low low", "lower"], 20000)

    def test_empty(self):
        with pytest.raises(DataError):
            learn_bpe([], 5)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.text("abcd ", min_size=1, max_size=20), min_size=1, max_size=8),
           st.integers(0, 30))
    def test_matches_naive_oracle(self, corpus, ops):
        if not any(line.split() for line in corpus):
            return
        assert learn_bpe(corpus, ops).merges == naive_bpe(corpus, ops)

    def test_deterministic(self):
        corpus = ["the cat sat on the mat", "the hat"] * 3
        assert learn_bpe(corpus, 50) == learn_bpe(list(corpus), 50)

    def test_file_format(self, tmp_path):
        m = learn_bpe(["low low low", "lower"], 3)
        m.save(tmp_path / "m.bpe")
        text = (tmp_path / "m.bpe").read_text(encoding="utf-8")
        assert text.startswith(f"#bpe v1 {m.count}\n")
        assert BpeMerges.load(tmp_path / "m.bpe") == m

    def test_bad_header(self):
        with pytest.raises(DataError):
            BpeMerges.loads("l o\n")


class TestApplyBpe:
    def test_no_merges(self):
        assert apply_bpe("ab", BpeMerges(())) == ["a", "b</w>"]

    def test_trace(self):
        assert apply_bpe("low", BpeMerges((("l", "o"), ("lo", "w</w>")))) == ["low</w>"]

    def test_priority_not_position(self):
        m = BpeMerges((("b", "c</w>"), ("a", "b")))
        assert apply_bpe("abc", m) == ["a", "bc</w>"]

    def test_unseen_word(self):
        assert apply_bpe("xyz", learn_bpe(["low low"], 5)) == ["x", "y", "z</w>"]

    @settings(max_examples=80, deadline=None)
    @given(st.text("abcdef", min_size=1, max_size=15))
    def test_lossless(self, word):
        m = learn_bpe(["abc abc abd fed cab", "bad dab"], 10)
        pieces = BpeSegmenter(m).segment_word(word)
        assert "".join(pieces).replace("</w>", "") == word
        assert pieces[-1].endswith("</w>")


def test_pretokenize_detaches_punctuation():
    assert pretokenize("Hello, world!") == ["Hello", ",", "world", "!"]


class TestEncode:
    v = build_char_vocab(["ab c"])

    def test_char(self):
        assert encode("ab", "char", self.v) == [self.v.id("a"), self.v.id("b"), EOS]

    def test_empty(self):
        assert encode("", "char", self.v) == [EOS]

    def test_unknown(self):
        assert encode("z", "char", self.v) == [UNK, EOS]

    def test_bpe_needs_merges(self):
        with pytest.raises(DataError):
            encode("ab", "bpe", self.v)

    @given(st.text("ab c", max_size=30))
    def test_char_round_trip(self, s):
        assert detokenize(encode(s, "char", self.v), "char", self.v) == s

    def test_bpe_round_trip(self):
        corpus = ["the cat sat", "the mat"]
        m = learn_bpe(corpus, 10)
        seg = BpeSegmenter(m)
        v = build_token_vocab(seg.segment(s) for s in corpus)
        assert detokenize(encode("the cat sat", "bpe", v, m), "bpe", v) == "the cat sat"


class TestFilter:
    def test_char_boundary(self):
        keep = ("a" * 450, "b")
        drop = ("a" * 451, "b")
        assert filter_corpus([keep, drop], "char") == [keep]

    def test_bpe_boundary(self):
        keep = (["x"] * 3, ["y"] * 50)
        drop = (["x"] * 3, ["y"] * 51)
        assert filter_corpus([keep, drop], "bpe") == [keep]

    @given(st.lists(st.tuples(st.text(max_size=460), st.text(max_size=460)), max_size=10))
    def test_never_grows_or_modifies(self, pairs):
        out = filter_corpus(pairs, "char")
        assert len(out) <= len(pairs)
        assert all(p in pairs for p in out)


class TestBatches:
    def test_single_pair_at_budget(self):
        batches = make_batches([([4, EOS], [4] * 9 + [EOS])], 10)
        assert len(batches) == 1 and batches[0].token_count == 10

    def test_pad_to_stride(self):
        b = make_batches([([4] * 6 + [EOS], [5, EOS])], 100, stride=5)[0]
        assert b.src_ids.shape == (1, 10)
        assert b.src_pad_mask.sum() == 3

    def test_pair_over_budget(self):
        with pytest.raises(DataError):
            make_batches([([4, EOS], [5] * 11)], 10)

    def test_default_budget(self):
        import inspect
        assert inspect.signature(make_batches).parameters["token_budget"].default == 6144

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=40),
           st.integers(21, 80), st.sampled_from([1, 5]), st.integers(0, 5))
    def test_invariants(self, lens, budget, stride, seed):
        pairs = [([4] * a + [EOS], [5] * b + [EOS]) for a, b in lens]
        batches = make_batches(pairs, budget, stride, seed)
        assert sum(b.size for b in batches) == len(pairs)
        for b in batches:
            assert b.token_count <= budget
            assert b.token_count == int((~b.tgt_pad_mask).sum()) - b.size
            assert b.src_ids.shape[1] % stride == 0
            assert np.all(b.tgt_ids[:, 0] == BOS)
            for row, mask in ((b.src_ids, b.src_pad_mask), (b.tgt_ids, b.tgt_pad_mask)):
                assert np.array_equal(mask, row == PAD)
                for r, m in zip(row, mask):
                    n = int((~m).sum())
                    assert r[n - 1] == EOS and not m[:n].any()
        assert [b.src_ids.tolist() for b in batches] == \
            [b.src_ids.tolist() for b in make_batches(pairs, budget, stride, seed)]


def test_read_parallel_misaligned(tmp_path):
    (tmp_path / "s").write_text("a\nb\n", encoding="utf-8")
    (tmp_path / "t").write_text("a\n", encoding="utf-8")
    with pytest.raises(DataError):
        read_parallel(tmp_path / "s", tmp_path / "t")

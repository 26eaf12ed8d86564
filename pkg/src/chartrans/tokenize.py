"""Character and BPE segmentation, vocabularies, corpus filtering and batching."""

import heapq
import re
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import DataError, IOFailure

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
END_OF_WORD = "</w>"
UNK_SURFACE = "\u2047"

CHAR_VOCAB_SIZE = 300
BPE_OPERATIONS = 20000
MAX_CHARS = 450
MAX_SUBWORDS = 50
TOKEN_BUDGET = 6144


class Vocab:
    """Bijective token <-> id map with the four specials at ids 0-3."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.id_to_token == other.id_to_token

    def id(self, token):
        return self.token_to_id.get(token, UNK)

    def token(self, idx):
        return self.id_to_token[idx]

    def save(self, path):
        with _open(path, "w") as fh:
            for tok in self.id_to_token:
                fh.write(escape_token(tok) + "\n")

    def dumps(self):
        return "".join(escape_token(t) + "\n" for t in self.id_to_token)

    @classmethod
    def loads(cls, text):
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(unescape_token(line) for line in lines)

    @classmethod
    def load(cls, path):
        with _open(path, "r") as fh:
            return cls.loads(fh.read())


def escape_token(tok):
    return tok.replace("\\", "\\\\").replace("\n", "\\n").replace("\t", "\\t")


def unescape_token(text):
    out, i = [], 0
    while i < len(text):
        c = text[i]
        if c == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"n": "\n", "t": "\t", "\\": "\\"}.get(nxt, nxt))
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def _open(path, mode):
    try:
        return open(path, mode, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise IOFailure(f"cannot open {path}: {exc.strerror}") from exc


def build_char_vocab(corpus, max_size=CHAR_VOCAB_SIZE):
    """Keep the ``max_size - 4`` most frequent code points (ties: lower code point first)."""
    if max_size < 5:
        raise DataError(f"max_size must be at least 5, got {max_size}")
    counts = Counter()
    for line in corpus:
        counts.update(line)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], ord(kv[0])))
    return Vocab(list(SPECIALS) + [c for c, _ in ranked[:max_size - 4]])


def build_token_vocab(token_lists, max_size=None):
    """Vocabulary over already segmented sentences, ranked by frequency then lexicographically."""
    counts = Counter()
    for toks in token_lists:
        counts.update(toks)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        ranked = ranked[:max_size - 4]
    return Vocab(list(SPECIALS) + [t for t, _ in ranked])


# ---------------------------------------------------------------------------
# pretokenizer and BPE
# ---------------------------------------------------------------------------

_PUNCT = re.compile(r"([^\w\s])")


def pretokenize(line):
    """Whitespace split with punctuation detached; case is preserved."""
    return _PUNCT.sub(r" \1 ", line).split()


@dataclass(frozen=True)
class BpeMerges:
    merges: tuple

    @property
    def count(self):
        return len(self.merges)

    def ranks(self):
        return {pair: i for i, pair in enumerate(self.merges)}

    def dumps(self):
        lines = [f"#bpe v1 {self.count}"]
        lines += [f"{a} {b}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    def save(self, path):
        with _open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text):
        lines = text.split("\n")
        header = lines[0].split() if lines else []
        if len(header) != 3 or header[:2] != ["#bpe", "v1"]:
            raise DataError("merges file must start with '#bpe v1 <count>'")
        pairs = []
        for line in lines[1:]:
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise DataError(f"malformed merge line {line!r}")
            pairs.append((parts[0], parts[1]))
        if len(pairs) != int(header[2]):
            raise DataError(f"merges header announces {header[2]} pairs, found {len(pairs)}")
        return cls(tuple(pairs))

    @classmethod
    def load(cls, path):
        with _open(path, "r") as fh:
            return cls.loads(fh.read())


def _word_symbols(word):
    return tuple(word[:-1]) + (word[-1] + END_OF_WORD,)


def learn_bpe(corpus, num_ops=BPE_OPERATIONS):
    """Learn up to ``num_ops`` merges from whitespace-pretokenized sentences.

    The most frequent adjacent pair is merged at each step, ties going to the
    lexicographically smallest pair. Learning stops early once no pair occurs
    at least twice.
    """
    if num_ops < 0:
        raise DataError("num_ops must be non-negative")
    freqs = Counter()
    seen_line = False
    for line in corpus:
        seen_line = True
        freqs.update(line.split())
    if not seen_line or not freqs:
        raise DataError("cannot learn BPE from an empty corpus")

    words = [list(_word_symbols(w)) for w in freqs]
    wfreq = list(freqs.values())
    pair_count = Counter()
    where = defaultdict(set)
    for wi, syms in enumerate(words):
        for p in zip(syms, syms[1:]):
            pair_count[p] += wfreq[wi]
            where[p].add(wi)
    heap = [(-c, p) for p, c in pair_count.items()]
    heapq.heapify(heap)

    merges = []
    while len(merges) < num_ops and heap:
        negc, pair = heapq.heappop(heap)
        if pair_count.get(pair, 0) != -negc:
            continue  # stale heap entry
        if -negc < 2:
            break
        merges.append(pair)
        a, b = pair
        joined = a + b
        touched = Counter()
        for wi in sorted(where.pop(pair, ())):
            syms = words[wi]
            f = wfreq[wi]
            for p in zip(syms, syms[1:]):
                touched[p] -= f
            new, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    new.append(joined)
                    i += 2
                else:
                    new.append(syms[i])
                    i += 1
            words[wi] = new
            for p in zip(new, new[1:]):
                touched[p] += f
                where[p].add(wi)
        for p, delta in touched.items():
            if delta == 0:
                continue
            c = pair_count.get(p, 0) + delta
            if c > 0:
                pair_count[p] = c
                heapq.heappush(heap, (-c, p))
            else:
                pair_count.pop(p, None)
        pair_count.pop(pair, None)
    return BpeMerges(tuple(merges))


class BpeSegmenter:
    """Applies learned merges greedily by priority, with a per-word cache."""

    def __init__(self, merges):
        self.merges = merges
        self._ranks = merges.ranks()
        self._cache = {}

    def segment_word(self, word):
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        syms = list(_word_symbols(word))
        ranks = self._ranks
        while len(syms) > 1:
            best, best_rank = None, None
            for p in zip(syms, syms[1:]):
                r = ranks.get(p)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = p, r
            if best is None:
                break
            a, b = best
            new, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    new.append(a + b)
                    i += 2
                else:
                    new.append(syms[i])
                    i += 1
            syms = new
        out = tuple(syms)
        self._cache[word] = out
        return out

    def segment(self, sentence):
        toks = []
        for word in pretokenize(sentence):
            toks.extend(self.segment_word(word))
        return toks


def apply_bpe(sentence, merges):
    return BpeSegmenter(merges).segment(sentence)


def encode(sentence, mode, vocab, merges=None):
    """Token ids for ``sentence`` followed by EOS; unknown tokens map to UNK."""
    if mode == "char":
        toks = sentence
    elif mode == "bpe":
        if merges is None:
            raise DataError("bpe mode requires merges")
        seg = merges if isinstance(merges, BpeSegmenter) else BpeSegmenter(merges)
        toks = seg.segment(sentence)
    else:
        raise DataError(f"unknown segmentation mode {mode!r}")
    return [vocab.id(t) for t in toks] + [EOS]


def filter_corpus(pairs, mode):
    """Drop pairs with a side longer than 450 characters (char) or 50 tokens (bpe).

    In char mode the items are strings; in bpe mode they are token sequences.
    """
    limit = MAX_CHARS if mode == "char" else MAX_SUBWORDS
    if mode not in ("char", "bpe"):
        raise DataError(f"unknown segmentation mode {mode!r}")
    return [(s, t) for s, t in pairs if len(s) <= limit and len(t) <= limit]


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    src_ids: np.ndarray       # B x Ls, rows end with EOS then PAD
    tgt_ids: np.ndarray       # B x Lt, rows are BOS ... EOS then PAD
    src_pad_mask: np.ndarray  # True at PAD
    tgt_pad_mask: np.ndarray
    token_count: int          # non-pad target tokens excluding BOS

    @property
    def size(self):
        return self.src_ids.shape[0]


def pad_rows(rows, multiple=1, prefix=()):
    width = max(len(r) for r in rows) + len(prefix)
    width = -(-width // multiple) * multiple
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        seq = list(prefix) + list(r)
        out[i, :len(seq)] = seq
    return out


def collate(pairs, stride=1):
    """Build one :class:`Batch` from encoded (src_ids, tgt_ids) pairs."""
    src = pad_rows([s for s, _ in pairs], multiple=stride)
    tgt = pad_rows([t for _, t in pairs], prefix=(BOS,))
    return Batch(src, tgt, src == PAD, tgt == PAD, int(sum(len(t) for _, t in pairs)))


def make_batches(pairs, token_budget=TOKEN_BUDGET, stride=1, seed=13):
    """Length-bucketed, budget-packed batches in a seed-determined order.

    Pairs are ordered by (target length, source length) with a seeded random
    tie order, packed greedily while the non-pad target tokens stay within
    ``token_budget``, and the resulting batches are shuffled with the same
    seed.
    """
    pairs = list(pairs)
    if not pairs:
        return []
    for s, t in pairs:
        if len(t) > token_budget:
            raise DataError(f"target of {len(t)} tokens exceeds the batch budget of {token_budget}")
    rng = np.random.default_rng(seed)
    jitter = rng.permutation(len(pairs))
    order = sorted(range(len(pairs)), key=lambda i: (len(pairs[i][1]), len(pairs[i][0]), jitter[i]))
    groups, cur, used = [], [], 0
    for i in order:
        n = len(pairs[i][1])
        if cur and used + n > token_budget:
            groups.append(cur)
            cur, used = [], 0
        cur.append(pairs[i])
        used += n
    if cur:
        groups.append(cur)
    return [collate(groups[j], stride) for j in rng.permutation(len(groups))]


def read_lines(path):
    with _open(path, "r") as fh:
        return fh.read().splitlines()


def read_parallel(src_path, tgt_path):
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise DataError(f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}")
    return list(zip(src, tgt))

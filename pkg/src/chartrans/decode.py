"""Greedy and beam-search decoding, detokenisation and decode-length caps.

The decoders accept any object with ``encode(src_ids)`` and
``log_probs(enc, prefixes) -> (k, V)`` (see :class:`chartrans.model.Seq2Seq`),
which keeps them testable against small hand-built distributions.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .tokenize import BOS, END_OF_WORD, EOS, PAD, UNK, UNK_SURFACE

CHAR_BEAM = 20
BPE_BEAM = 5


def default_beam(mode):
    return BPE_BEAM if mode in ("bpe", "bpe-transformer") else CHAR_BEAM


@dataclass
class BeamHypothesis:
    tokens: tuple          # starts with BOS
    logprob: float = 0.0
    finished: bool = False

    def score(self, alpha):
        if alpha == 0:
            return self.logprob
        return self.logprob / (len(self.tokens) - 1) ** alpha


def _masked(logp):
    logp = np.array(logp, dtype=np.float64)
    logp[:, PAD] = -np.inf
    logp[:, BOS] = -np.inf
    return logp


def _strip(tokens):
    return [t for t in tokens[1:] if t not in (EOS, BOS, PAD)]


def greedy_decode(src, model, max_len):
    """Arg-max token at every step (lowest id on ties) until EOS or ``max_len`` tokens."""
    if max_len < 1:
        raise DataError("max_len must be at least 1")
    enc = model.encode(src)
    seq = [BOS]
    for _ in range(max_len):
        logp = _masked(model.log_probs(enc, np.array([seq])))[0]
        tok = int(np.argmax(logp))
        seq.append(tok)
        if tok == EOS:
            break
    return _strip(seq)


def beam_search(src, model, beam_size, max_len, alpha=0.0, return_hypothesis=False):
    """Best target sequence under ``logprob / length**alpha``.

    Hypotheses still live after ``max_len`` steps are closed as they are.
    Search stops early once the best finished score cannot be beaten by any
    live hypothesis.
    """
    if beam_size < 1 or max_len < 1:
        raise DataError("beam_size and max_len must be at least 1")
    enc = model.encode(src)
    live = [BeamHypothesis((BOS,))]
    done = []
    for step in range(1, max_len + 1):
        logp = _masked(model.log_probs(enc, np.array([h.tokens for h in live])))
        V = logp.shape[1]
        # Only each hypothesis' top beam_size tokens can enter the global top
        # beam_size: any other token of that hypothesis is outranked by
        # beam_size siblings. So truncating before the merge is exact.
        k = min(beam_size, V)
        cand = []
        for hi, h in enumerate(live):
            row = logp[hi]
            top = np.lexsort((np.arange(V), -row))[:k]
            for tok in top:
                if np.isfinite(row[tok]):
                    cand.append(BeamHypothesis(h.tokens + (int(tok),), h.logprob + float(row[tok]),
                                               int(tok) == EOS))
        cand.sort(key=lambda c: (-c.score(alpha), c.tokens))
        live = []
        for c in cand[:beam_size]:
            (done if c.finished else live).append(c)
        if not live:
            break
        if done:
            best_done = max(h.score(alpha) for h in done)
            if alpha == 0:
                bound = max(h.logprob for h in live)
            else:
                # log-probs only fall, so the best a live hypothesis can reach is
                # its current log-prob spread over the longest allowed length
                bound = max(h.logprob / max_len ** alpha for h in live)
            if best_done >= bound:
                break
    pool = done + live
    best = min(pool, key=lambda c: (-c.score(alpha), c.tokens))
    return best if return_hypothesis else _strip(best.tokens)


def decode_max_len(src_len, mode):
    """Target length cap: 2 * src_len + 10, at most 500 characters or 60 subwords."""
    if src_len < 0:
        raise DataError("src_len must be non-negative")
    cap = 60 if mode in ("bpe", "bpe-transformer") else 500
    return min(2 * src_len + 10, cap)


def detokenize(tokens, mode, vocab):
    """Surface string for ids (or token strings); UNK renders as the U+2047 mark."""
    parts = []
    for t in tokens:
        if isinstance(t, (int, np.integer)):
            if t in (PAD, BOS, EOS):
                continue
            parts.append(UNK_SURFACE if t == UNK else vocab.token(int(t)))
        else:
            parts.append(t)
    text = "".join(parts)
    if mode in ("bpe", "bpe-transformer"):
        text = text.replace(END_OF_WORD, " ").rstrip(" ")
    return text


def translate_sentence(sentence, bundle, beam_size=None, alpha=0.0):
    from .model import Seq2Seq
    from .tokenize import encode

    mode = bundle.seg_mode
    src = encode(sentence, mode, bundle.src_vocab, bundle.src_merges)
    beam_size = beam_size or default_beam(mode)
    model = Seq2Seq(bundle.cfg, bundle.params)
    max_len = decode_max_len(len(src) - 1, mode)
    if beam_size == 1 and alpha == 0:
        out = greedy_decode(src, model, max_len)
    else:
        out = beam_search(src, model, beam_size, max_len, alpha)
    return detokenize(out, mode, bundle.tgt_vocab)

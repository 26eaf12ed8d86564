"""Corpus-level BLEU-4, chrF and CharacTER."""

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DataError, UsageError

ARROWS = {"BLEU": "↑", "CHRF": "↑", "CharacTER": "↓"}
METRIC_KEYS = {"bleu": "BLEU", "chrf": "CHRF", "character": "CharacTER"}


@dataclass
class MetricScore:
    name: str
    value: float
    components: dict = field(default_factory=dict)


def _check(hyps, refs):
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise DataError("cannot score an empty corpus")


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hyps, refs):
    """Single-reference corpus BLEU with clipped counts and no smoothing."""
    _check(hyps, refs)
    match = [0] * 4
    total = [0] * 4
    c = r = 0
    for h, ref in zip(hyps, refs):
        ht, rt = h.split(), ref.split()
        c += len(ht)
        r += len(rt)
        for n in range(1, 5):
            hc, rc = _ngrams(ht, n), _ngrams(rt, n)
            match[n - 1] += sum(min(k, rc[g]) for g, k in hc.items())
            total[n - 1] += max(len(ht) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(match, total)]
    bp = 0.0 if c == 0 else min(1.0, math.exp(1.0 - r / c))
    if min(precisions) == 0.0:
        value = 0.0
    else:
        value = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / 4)
    comps = {f"p{n}": precisions[n - 1] for n in range(1, 5)}
    comps.update(bp=bp, hyp_len=c, ref_len=r)
    return MetricScore("BLEU", value, comps)


def _char_ngrams(s, n):
    return Counter(s[i:i + n] for i in range(len(s) - n + 1))


def chrf(hyps, refs, max_n=6, beta=3.0):
    """Character n-gram F-score over n = 1..max_n with whitespace removed.

    Precision and recall come from counts summed over the corpus and are
    averaged over the orders for which both sides have n-grams.
    """
    _check(hyps, refs)
    hyp_tot = [0] * max_n
    ref_tot = [0] * max_n
    common = [0] * max_n
    for h, ref in zip(hyps, refs):
        h = "".join(h.split())
        ref = "".join(ref.split())
        for n in range(1, max_n + 1):
            hc, rc = _char_ngrams(h, n), _char_ngrams(ref, n)
            hyp_tot[n - 1] += sum(hc.values())
            ref_tot[n - 1] += sum(rc.values())
            common[n - 1] += sum((hc & rc).values())
    P = R = 0.0
    orders = 0
    comps = {}
    for i in range(max_n):
        if hyp_tot[i] and ref_tot[i]:
            p, rr = common[i] / hyp_tot[i], common[i] / ref_tot[i]
            P += p
            R += rr
            orders += 1
            comps[f"P{i + 1}"], comps[f"R{i + 1}"] = p, rr
    if orders:
        P /= orders
        R /= orders
    comps.update(P=P, R=R, beta=beta, orders=orders)
    b2 = beta * beta
    denom = b2 * P + R
    value = 0.0 if denom == 0 else 100.0 * (1 + b2) * P * R / denom
    return MetricScore("CHRF", value, comps)


def _codes(s):
    return np.fromiter((ord(ch) for ch in s), dtype=np.int64, count=len(s))


def levenshtein(a, b):
    """Unit-cost edit distance between two strings."""
    return _kernels.levenshtein_ids(_codes(a), _codes(b))


def _shift_candidates(hw, rw, max_block):
    """All (start, length, dest) word-block moves whose block also occurs in ``rw``."""
    ref_spans = set()
    for i in range(len(rw)):
        for ln in range(1, min(max_block, len(rw) - i) + 1):
            ref_spans.add(tuple(rw[i:i + ln]))
    n = len(hw)
    for i in range(n):
        for ln in range(1, min(max_block, n - i) + 1):
            if tuple(hw[i:i + ln]) not in ref_spans:
                break
            for dest in range(n - ln + 1):
                if dest != i:
                    yield i, ln, dest


def apply_shift(words, start, length, dest):
    block = words[start:start + length]
    rest = words[:start] + words[start + length:]
    return rest[:dest] + block + rest[dest:]


def character_sentence(hyp, ref, max_block=10):
    """(shifts, edit distance) from greedy best-improvement word shifting."""
    hw, rw = hyp.split(), ref.split()
    ref_codes = _codes(" ".join(rw))
    cur = hw
    dist = _kernels.levenshtein_ids(_codes(" ".join(cur)), ref_codes)
    shifts = 0
    while dist > 0:
        best = None
        for start, ln, dest in _shift_candidates(cur, rw, max_block):
            cand = apply_shift(cur, start, ln, dest)
            d = _kernels.levenshtein_ids(_codes(" ".join(cand)), ref_codes)
            if best is None or d < best[0]:
                best = (d, cand)
        # a shift costs 1, so it must cut the edit distance by more than 1
        if best is None or best[0] + 1 >= dist:
            break
        dist, cur = best
        shifts += 1
    return shifts, dist


def character_score(hyps, refs, max_block=10):
    """Mean over sentences of (shifts + char edits) / hypothesis length, x100; lower is better."""
    _check(hyps, refs)
    total = 0.0
    empty = 0
    shifts_all = 0
    for h, r in zip(hyps, refs):
        shifts, dist = character_sentence(h, r, max_block)
        length = len(" ".join(h.split()))
        if length == 0:
            empty += 1
            length = 1
        shifts_all += shifts
        total += (shifts + dist) / length
    value = 100.0 * total / len(hyps)
    return MetricScore("CharacTER", value, {"shifts": shifts_all, "empty_hypotheses": empty})


def score_corpus(hyps, refs, metrics=("bleu", "chrf", "character"), chrf_beta=3.0):
    if not metrics:
        raise UsageError("no metrics selected")
    out = []
    for m in metrics:
        if m not in METRIC_KEYS:
            raise UsageError(f"unknown metric {m!r}; choose from {', '.join(METRIC_KEYS)}")
        if m == "bleu":
            out.append(bleu4(hyps, refs))
        elif m == "chrf":
            out.append(chrf(hyps, refs, beta=chrf_beta))
        else:
            out.append(character_score(hyps, refs))
    return out


def format_report(scores):
    """``metric=value`` lines, ``#``-prefixed components and an aligned table."""
    lines = []
    for s in scores:
        key = [k for k, v in METRIC_KEYS.items() if v == s.name][0]
        lines.append(f"{key}={s.value:.4f}")
    for s in scores:
        key = [k for k, v in METRIC_KEYS.items() if v == s.name][0]
        for ck, cv in s.components.items():
            cv = f"{cv:.6f}" if isinstance(cv, float) else str(cv)
            lines.append(f"# {key}.{ck}={cv}")
    header = "# " + "  ".join(f"{('C-TER' if s.name == 'CharacTER' else s.name) + ARROWS[s.name]:>8}" for s in scores)
    row = "# " + "  ".join(f"{s.value:>8.2f}" for s in scores)
    lines += [header, row]
    return "\n".join(lines) + "\n"


def score_files(hyp_path, ref_path, metrics=("bleu", "chrf", "character"), chrf_beta=3.0):
    from .tokenize import read_lines

    hyps, refs = read_lines(hyp_path), read_lines(ref_path)
    if len(hyps) != len(refs):
        raise DataError(f"{hyp_path} has {len(hyps)} lines but {ref_path} has {len(refs)}")
    scores = score_corpus(hyps, refs, metrics, chrf_beta)
    return scores, format_report(scores)

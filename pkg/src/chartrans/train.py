"""Loss, optimiser, schedule, gradient accumulation, training loop and update timing."""

import math
import os
import statistics
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, checkpoint
from . import tensor as T
from .errors import DataError, DimensionError, NumericError
from .model import ModelConfig, forward, init_params
from .tokenize import PAD, BpeMerges, Vocab, collate, make_batches


@dataclass
class OptConfig:
    lr_factor: float = 2.0
    warmup_steps: int = 8000
    beta1: float = 0.9
    beta2: float = 0.998
    eps: float = 1e-9
    label_smoothing: float = 0.1
    max_updates: int = 100000
    # loop settings
    accum_count: int = 4
    token_budget: int = 6144
    eval_interval: int = 100

    def __post_init__(self):
        if self.lr_factor <= 0:
            raise DataError("lr_factor must be positive")
        if not 0 <= self.label_smoothing < 1:
            raise DataError("label_smoothing must be in [0, 1)")
        if self.accum_count < 1:
            raise DataError("accum_count must be at least 1")


@dataclass
class TrainState:
    step: int = 0
    accum: int = 0
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    rng_seed: int = 13
    best_dev_loss: float = math.inf


@dataclass
class ModelBundle:
    """Everything needed to run a trained model on raw text."""

    cfg: ModelConfig
    params: dict
    src_vocab: Vocab
    tgt_vocab: Vocab
    src_merges: BpeMerges = None
    tgt_merges: BpeMerges = None

    @property
    def seg_mode(self):
        return "char" if self.cfg.char_level else "bpe"


# ---------------------------------------------------------------------------
# objective and optimiser
# ---------------------------------------------------------------------------

def nll_loss(logits, targets, pad_mask, smoothing=0.0):
    """Summed token cross-entropy over non-pad positions.

    With smoothing ``eps`` the target distribution is ``(1 - eps)`` on the gold
    token plus ``eps`` spread uniformly over every non-PAD entry. Returns
    ``(loss_sum, token_count)``; divide for a per-token value.
    """
    targets = np.asarray(targets)
    keep = ~np.asarray(pad_mask, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        raise DataError("nll_loss: batch has no non-pad target tokens")
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"nll_loss: logits {logits.shape} vs targets {targets.shape}")
    logp = T.log_softmax_lastdim(logits)
    weights = T.Tensor(keep.astype(T.default_dtype()))
    per_tok = -T.pick_lastdim(logp, targets)
    if smoothing > 0:
        V = logits.shape[-1]
        uniform = -(T.tsum(logp, axis=-1) - T.pick_lastdim(logp, np.full(targets.shape, PAD))) * (1.0 / (V - 1))
        per_tok = per_tok * (1.0 - smoothing) + uniform * smoothing
    return T.tsum(per_tok * weights), n


def noam_lr(step, d_model=512, factor=2.0, warmup=8000):
    """``factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""
    if step < 1:
        raise DataError("noam_lr is defined for step >= 1")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def adam_step(params, state, lr, cfg):
    """One bias-corrected Adam update at ``state.step``; clears gradients."""
    coef = {}
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.opt_m.get(name)
        if m is None:
            m = state.opt_m[name] = np.zeros_like(p.data)
            state.opt_v[name] = np.zeros_like(p.data)
        v = state.opt_v[name]
        if m.shape != g.shape:
            raise DimensionError(f"adam: moment shape {m.shape} vs gradient {g.shape} for {name}")
        dt = p.data.dtype
        if dt not in coef:
            coef[dt] = _kernels.adam_coefficients(dt, lr, cfg.beta1, cfg.beta2, state.step, cfg.eps)
        g = np.ascontiguousarray(g, dtype=dt)
        p.data = np.ascontiguousarray(p.data)
        _kernels.adam_update(p.data.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1), *coef[dt])
        p.grad = None


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------

@dataclass
class UpdateMetrics:
    step: int
    loss: float        # objective per target token
    lr: float
    seconds: float
    tokens: int


def train_update(batches, params, model_cfg, state, cfg):
    """Accumulate gradients over ``batches`` (normally 4) and apply one Adam step.

    Each micro-batch loss is divided by the total non-pad target tokens of the
    whole group, so the update equals the one from the concatenated batch.
    """
    start = time.perf_counter()
    total = sum(b.token_count for b in batches)
    loss_sum = 0.0
    for k, b in enumerate(batches):
        rng = np.random.default_rng([state.rng_seed, state.step, k]) if model_cfg.dropout > 0 else None
        logits = forward(b, params, model_cfg, rng=rng, training=True)
        loss, _ = nll_loss(logits, b.tgt_ids[:, 1:], b.tgt_pad_mask[:, 1:], cfg.label_smoothing)
        T.backward(loss * (1.0 / total))
        loss_sum += loss.item()
        state.accum = (k + 1) % len(batches)
    if not math.isfinite(loss_sum):
        raise NumericError(f"non-finite loss at update {state.step + 1}")
    state.step += 1
    lr = noam_lr(state.step, model_cfg.d_model, cfg.lr_factor, cfg.warmup_steps)
    adam_step(params, state, lr, cfg)
    return UpdateMetrics(state.step, loss_sum / total, lr, time.perf_counter() - start, total)


def evaluate(pairs_or_batches, params, model_cfg, token_budget=6144):
    """Mean unsmoothed NLL per target token."""
    batches = pairs_or_batches
    if batches and not hasattr(batches[0], "tgt_ids"):
        batches = make_batches(batches, token_budget, model_cfg.pool_stride, seed=0)
    total, n = 0.0, 0
    with T.no_grad():
        for b in batches:
            logits = forward(b, params, model_cfg)
            loss, k = nll_loss(logits, b.tgt_ids[:, 1:], b.tgt_pad_mask[:, 1:], 0.0)
            total += loss.item()
            n += k
    return total / n


class BatchStream:
    """Endless seed-determined micro-batch sequence; epoch ``e`` is reshuffled with (seed, e)."""

    def __init__(self, pairs, token_budget, stride, seed):
        self.pairs = pairs
        self.token_budget = token_budget
        self.stride = stride
        self.seed = seed
        self._sizes = []
        self._cached = (None, None)

    def _epoch(self, e):
        if self._cached[0] != e:
            batches = make_batches(self.pairs, self.token_budget, self.stride, seed=self.seed * 1000003 + e)
            self._cached = (e, batches)
        return self._cached[1]

    def _size(self, e):
        while len(self._sizes) <= e:
            self._sizes.append(len(self._epoch(len(self._sizes))))
        return self._sizes[e]

    def __getitem__(self, index):
        e = 0
        while index >= self._size(e):
            index -= self._size(e)
            e += 1
        return self._epoch(e)[index]

    def group(self, update_index, accum):
        return [self[update_index * accum + k] for k in range(accum)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, bundle, state=None):
    texts = (bundle.src_vocab.dumps(), bundle.tgt_vocab.dumps(),
             bundle.src_merges.dumps() if bundle.src_merges else "",
             bundle.tgt_merges.dumps() if bundle.tgt_merges else "")
    value_bytes = 8 if T.get_precision() == "double" else 4
    checkpoint.save(path, bundle.cfg.to_record(), bundle.params, state, texts, value_bytes)


def load_checkpoint(path):
    record, arrays, state, texts = checkpoint.load(path)
    cfg = ModelConfig.from_record(record)
    params = {k: T.Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    expected = init_params(cfg, seed=0)
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in params):
        raise checkpoint.CheckpointError("checkpoint parameters do not match its model config")
    bundle = ModelBundle(cfg, params, Vocab.loads(texts[0]), Vocab.loads(texts[1]),
                         BpeMerges.loads(texts[2]) if texts[2] else None,
                         BpeMerges.loads(texts[3]) if texts[3] else None)
    tstate = None
    if state is not None:
        dt = T.default_dtype()
        tstate = TrainState(step=state["step"], accum=state["accum"], rng_seed=state["rng_seed"],
                            best_dev_loss=state["best_dev_loss"],
                            opt_m={k: v.astype(dt) for k, v in state["opt_m"].items()},
                            opt_v={k: v.astype(dt) for k, v in state["opt_v"].items()})
    return bundle, tstate


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

LOG_HEADER = "step\tloss_per_token\tlr\tsec_per_update\ttokens_per_sec"


def format_update(m):
    tps = m.tokens / m.seconds if m.seconds > 0 else float("inf")
    return f"{m.step}\t{m.loss:.6f}\t{m.lr:.6e}\t{m.seconds:.4f}\t{tps:.1f}"


def train_loop(train_pairs, dev_pairs, bundle, cfg, out_dir, state=None, seed=13, log=None):
    """Train until ``cfg.max_updates``; writes ``latest.ckpt`` and ``best.ckpt`` in ``out_dir``.

    ``log`` receives one tab-separated line per update plus ``#``-prefixed
    evaluation lines. Returns the final :class:`TrainState`.
    """
    log = log or sys.stdout
    if state is None:
        state = TrainState(rng_seed=seed)
    stream = BatchStream(train_pairs, cfg.token_budget, bundle.cfg.pool_stride, state.rng_seed)
    dev_batches = make_batches(dev_pairs, cfg.token_budget, bundle.cfg.pool_stride, seed=0) if dev_pairs else []
    latest = os.path.join(out_dir, "latest.ckpt")
    best = os.path.join(out_dir, "best.ckpt")
    while state.step < cfg.max_updates:
        group = stream.group(state.step, cfg.accum_count)
        m = train_update(group, bundle.params, bundle.cfg, state, cfg)
        log.write(format_update(m) + "\n")
        if state.step % cfg.eval_interval == 0 or state.step == cfg.max_updates:
            if dev_batches:
                dev = evaluate(dev_batches, bundle.params, bundle.cfg)
                log.write(f"# dev\tstep={state.step}\tloss_per_token={dev:.6f}\n")
                if dev < state.best_dev_loss:
                    state.best_dev_loss = dev
                    save_checkpoint(best, bundle, state)
            save_checkpoint(latest, bundle, state)
        log.flush()
    return state


# ---------------------------------------------------------------------------
# speed comparison
# ---------------------------------------------------------------------------

def synthetic_char_batches(n_batches, batch_size, length=450, tgt_length=None, vocab=300, seed=13):
    """Random character-id batches whose sources are exactly ``length`` long (EOS included)."""
    rng = np.random.default_rng(seed)
    tgt_length = length if tgt_length is None else tgt_length
    out = []
    for _ in range(n_batches):
        pairs = [(list(rng.integers(4, vocab, size=length - 1)) + [2],
                  list(rng.integers(4, vocab, size=tgt_length - 1)) + [2]) for _ in range(batch_size)]
        out.append(collate(pairs, stride=5))
    return out


def benchmark_updates(model_a, model_b, batches, n_updates=20, cfg=None, warmup=3):
    """Median seconds per update of two (ModelConfig, params) models on identical batches.

    Updates alternate between the two models so slow drifts in machine load
    hit both equally. Each update consumes all of ``batches`` as its
    accumulation group.
    """
    if n_updates < 5:
        raise DataError("benchmark needs at least 5 timed updates")
    for m in (model_a, model_b):
        if not m[0].char_level:
            raise DataError("benchmark compares character-level models only")
    cfg = cfg or OptConfig()
    states = [TrainState(), TrainState()]
    times = [[], []]
    for i in range(warmup + n_updates):
        for j, (mcfg, params) in enumerate((model_a, model_b)):
            metrics = train_update(batches, params, mcfg, states[j], cfg)
            if i >= warmup:
                times[j].append(metrics.seconds)
    med_a, med_b = statistics.median(times[0]), statistics.median(times[1])
    return {"a_sec": med_a, "b_sec": med_b, "ratio": med_b / med_a,
            "a_times": times[0], "b_times": times[1]}

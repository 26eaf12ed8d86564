"""Command-line entry point: ``chartrans <subcommand>``.

Exit codes: 0 success, 1 usage, 2 I/O, 3 data validation, 4 numeric failure.
"""

import argparse
import datetime
import io
import os
import sys

from . import _kernels
from . import config as C
from . import tensor as T
from .errors import ChartransError, DataError, IOFailure, UsageError
from .tokenize import (EOS, BpeMerges, BpeSegmenter, build_char_vocab, build_token_vocab, encode,
                       filter_corpus, learn_bpe, pretokenize, read_lines, read_parallel)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _globals(p, suppress):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="key=value config file")
    p.add_argument("--seed", type=int, default=default, help="root random seed (default 13)")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser():
    ap = _Parser(prog="chartrans", description="Character-level and subword Transformer NMT toolkit")
    _globals(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("bpe-learn", help="learn BPE merges from a corpus")
    _globals(p, True)
    p.add_argument("--input", required=True)
    p.add_argument("--num-ops", type=int, default=20000)
    p.add_argument("--output", required=True)

    p = sub.add_parser("vocab", help="build a vocabulary file")
    _globals(p, True)
    p.add_argument("--input", required=True)
    p.add_argument("--mode", dest="seg_mode", choices=("char", "bpe"), default="char")
    p.add_argument("--merges")
    p.add_argument("--max-size", type=int)
    p.add_argument("--output", required=True)

    p = sub.add_parser("train", help="train a model")
    _globals(p, True)
    p.add_argument("--mode", choices=("bpe-transformer", "char-transformer", "char-reduction-transformer"))
    p.add_argument("--preset", choices=sorted(C.PRESETS))
    for key in ("train_src", "train_tgt", "dev_src", "dev_tgt", "out_dir", "src_merges", "tgt_merges"):
        p.add_argument("--" + key.replace("_", "-"), dest=key)
    for key in ("bpe_ops", "max_updates", "eval_interval", "warmup_steps", "token_budget", "accum_count",
                "d_model", "heads", "d_ff", "enc_layers", "dec_layers", "enc_emb"):
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=int)
    for key in ("lr_factor", "label_smoothing", "dropout"):
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=float)
    p.add_argument("--precision", choices=("single", "double"))
    p.add_argument("--resume", action="store_const", const=True)

    p = sub.add_parser("translate", help="translate a file with a checkpoint")
    _globals(p, True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beam", type=int)
    p.add_argument("--alpha", type=float, default=0.0)

    p = sub.add_parser("score", help="score hypotheses against references")
    _globals(p, True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--metrics", default="bleu,chrf,character")
    p.add_argument("--chrf-beta", type=float, default=3.0)

    p = sub.add_parser("benchmark", help="time updates of char-transformer vs char-reduction-transformer")
    _globals(p, True)
    p.add_argument("--n-updates", type=int, default=20)
    p.add_argument("--d-model", type=int, default=512)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--batch-size", type=int, default=1, help="sentences per micro-batch")
    p.add_argument("--accum", type=int, default=4, help="micro-batches per update")
    p.add_argument("--length", type=int, default=450)
    p.add_argument("--total-updates", type=int, default=100000, help="for the projected-hours column")
    p.add_argument("--report", help="also write the report to this file")
    return ap


def _say(args, msg):
    if not args.quiet:
        print(msg)


def _write_text(path, text):
    from .checkpoint import atomic_write

    atomic_write(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_bpe_learn(args):
    lines = read_lines(args.input)
    merges = learn_bpe([" ".join(pretokenize(line)) for line in lines], args.num_ops)
    _write_text(args.output, merges.dumps())
    seg = BpeSegmenter(merges)
    toks = [seg.segment(line) for line in lines]
    vocab = {t for s in toks for t in s}
    _say(args, f"merges={merges.count}")
    _say(args, f"vocab_entries={len(vocab) + 4}")
    _say(args, f"tokens={sum(len(s) for s in toks)}")
    return 0


def cmd_vocab(args):
    lines = read_lines(args.input)
    if args.seg_mode == "char":
        vocab = build_char_vocab(lines, args.max_size or 300)
    else:
        if not args.merges:
            raise UsageError("--merges is required for --mode bpe")
        seg = BpeSegmenter(BpeMerges.load(args.merges))
        vocab = build_token_vocab([seg.segment(line) for line in lines], args.max_size)
    vocab.save(args.output)
    _say(args, f"vocab_size={len(vocab)}")
    return 0


def _prepare_corpus(run, mode):
    """Returns (bundle pieces, encoded train pairs, encoded dev pairs, stats)."""
    for key in ("train_src", "train_tgt", "out_dir"):
        if not run.get(key):
            raise UsageError(f"train needs {key.replace('_', '-')}")
    train = read_parallel(run["train_src"], run["train_tgt"])
    dev = read_parallel(run["dev_src"], run["dev_tgt"]) if run.get("dev_src") else []
    if mode == "char":
        kept = filter_corpus(train, "char")
        sv = build_char_vocab([s for s, _ in kept], run["char_vocab_size"])
        tv = build_char_vocab([t for _, t in kept], run["char_vocab_size"])
        enc = [(encode(s, "char", sv), encode(t, "char", tv)) for s, t in kept]
        dev_enc = [(encode(s, "char", sv), encode(t, "char", tv)) for s, t in filter_corpus(dev, "char")]
        return (sv, tv, None, None), enc, dev_enc, len(train) - len(kept)

    def merges_for(key, side):
        if run.get(key):
            return BpeMerges.load(run[key])
        return learn_bpe([" ".join(pretokenize(p[side])) for p in train], run["bpe_ops"])

    sm, tm = merges_for("src_merges", 0), merges_for("tgt_merges", 1)
    ss, ts = BpeSegmenter(sm), BpeSegmenter(tm)
    seg = [(ss.segment(s), ts.segment(t)) for s, t in train]
    kept = filter_corpus(seg, "bpe")
    sv = build_token_vocab([s for s, _ in kept])
    tv = build_token_vocab([t for _, t in kept])
    enc = [([sv.id(x) for x in s] + [EOS], [tv.id(x) for x in t] + [EOS]) for s, t in kept]
    dev_seg = filter_corpus([(ss.segment(s), ts.segment(t)) for s, t in dev], "bpe")
    dev_enc = [([sv.id(x) for x in s] + [EOS], [tv.id(x) for x in t] + [EOS]) for s, t in dev_seg]
    return (sv, tv, sm, tm), enc, dev_enc, len(train) - len(kept)


def cmd_train(args, run):
    from .model import init_params
    from .train import LOG_HEADER, ModelBundle, load_checkpoint, train_loop

    T.set_precision(run["precision"])
    mode = "bpe" if run["mode"] == "bpe-transformer" else "char"
    out_dir = run.get("out_dir")
    if not out_dir:
        raise UsageError("train needs --out-dir")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {out_dir}: {exc.strerror}") from exc
    (sv, tv, sm, tm), enc, dev_enc, dropped = _prepare_corpus(run, mode)
    if not enc:
        raise DataError("no training pairs survive length filtering")
    mcfg = C.model_config(run, len(sv), len(tv))
    ocfg = C.opt_config(run)
    state = None
    latest = os.path.join(out_dir, "latest.ckpt")
    if run.get("resume") and os.path.exists(latest):
        bundle, state = load_checkpoint(latest)
    else:
        bundle = ModelBundle(mcfg, init_params(mcfg, run["seed"]), sv, tv, sm, tm)

    resolved = dict(run)
    resolved.update({k: v for k, v in mcfg.to_record().items() if k in C.MODEL_KEYS})
    resolved.update({k: getattr(ocfg, k) for k in C.OPT_KEYS})
    resolved_text = C.dumps(resolved)
    _write_text(os.path.join(out_dir, "resolved.cfg"), resolved_text)

    log_path = os.path.join(out_dir, "train.log")
    try:
        log = open(log_path, "a" if state is not None else "w", encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot open {log_path}: {exc.strerror}") from exc
    with log:
        log.write(f"# timestamp {datetime.datetime.now().isoformat(timespec='seconds')}\n")
        for line in resolved_text.splitlines():
            log.write(f"# config {line}\n")
        log.write(f"# data train_pairs={len(enc)} dropped_by_length={dropped} dev_pairs={len(dev_enc)} "
                  f"src_vocab={len(sv)} tgt_vocab={len(tv)}\n")
        log.write("# " + LOG_HEADER + "\n")
        state = train_loop(enc, dev_enc, bundle, ocfg, out_dir, state=state, seed=run["seed"], log=log)
    _say(args, f"updates={state.step}")
    if state.best_dev_loss < float("inf"):
        _say(args, f"best_dev_loss={state.best_dev_loss:.6f}")
    _say(args, f"checkpoint={latest}")
    return 0


def cmd_translate(args, run):
    from .decode import translate_sentence
    from .train import load_checkpoint

    bundle, _ = load_checkpoint(args.checkpoint)
    lines = read_lines(args.input)
    out = io.StringIO()
    for line in lines:
        out.write(translate_sentence(line, bundle, args.beam, args.alpha) + "\n")
    _write_text(args.output, out.getvalue())
    _say(args, f"translated={len(lines)}")
    return 0


def cmd_score(args, run):
    from .metrics import score_files

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    _, report = score_files(args.hyp, args.ref, metrics, args.chrf_beta)
    sys.stdout.write(report)
    return 0


def benchmark_report(result, labels, total_updates, note=""):
    rows = [("model", "sec/update", "overall_hours", "percent")]
    base = result["a_sec"]
    for label, sec in zip(labels, (result["a_sec"], result["b_sec"])):
        rows.append((label, f"{sec:.3f}", f"{sec * total_updates / 3600:.2f}", f"{100 * sec / base:.0f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.append(f"ratio={result['ratio']:.4f}")
    lines.append("# reference timings: 1.362 vs 0.894 sec/update, 66 percent")
    if note:
        lines.append(f"# {note}")
    return "\n".join(lines) + "\n"


def cmd_benchmark(args, run):
    from .model import ModelConfig, init_params
    from .train import benchmark_updates, synthetic_char_batches

    seed = run["seed"]
    kw = dict(d_model=args.d_model, enc_layers=args.layers, dec_layers=args.layers)
    if args.d_model != 512:
        kw.update(heads=max(1, args.d_model // 64), d_ff=4 * args.d_model)
    base = ModelConfig(mode="char-transformer", **kw)
    red = ModelConfig(mode="char-reduction-transformer", **kw)
    try:
        models = [(base, init_params(base, seed)), (red, init_params(red, seed))]
    except MemoryError:
        raise DataError(f"not enough memory for d_model={args.d_model} benchmark models; "
                        "retry with a smaller --d-model") from None
    batches = synthetic_char_batches(args.accum, args.batch_size, args.length, seed=seed)
    result = benchmark_updates(models[0], models[1], batches, args.n_updates)
    note = (f"d_model={args.d_model} layers={args.layers} batch={args.batch_size}x{args.accum} "
            f"length={args.length} n_updates={args.n_updates} backend={_kernels.backend()}")
    report = benchmark_report(result, ("Transformer(char)", "CharTransformer"), args.total_updates, note)
    sys.stdout.write(report)
    if args.report:
        _write_text(args.report, report)
    return 0


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    if not args.command:
        ap.print_usage(sys.stderr)
        return 1
    try:
        file_values = C.read_config(args.config) if args.config else {}
        cli = {k: v for k, v in vars(args).items() if k in C.SCHEMA}
        run = C.resolve(file_values, cli)
        if args.command == "bpe-learn":
            return cmd_bpe_learn(args)
        if args.command == "vocab":
            return cmd_vocab(args)
        handler = {"train": cmd_train, "translate": cmd_translate, "score": cmd_score,
                   "benchmark": cmd_benchmark}[args.command]
        return handler(args, run)
    except ChartransError as exc:
        print(f"chartrans: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

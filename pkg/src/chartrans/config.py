"""Run configuration: presets, ``key=value`` config files and schema checks."""

from dataclasses import fields

from .errors import ConfigError, IOFailure
from .model import MODES, ModelConfig
from .train import OptConfig

# key -> parser; every key a subcommand may consume
SCHEMA = {
    # data and paths
    "train_src": str, "train_tgt": str, "dev_src": str, "dev_tgt": str, "out_dir": str,
    "src_merges": str, "tgt_merges": str, "bpe_ops": int, "char_vocab_size": int,
    # run
    "mode": str, "preset": str, "seed": int, "precision": str, "resume": lambda v: _bool(v),
    # model
    "enc_emb": int, "d_model": int, "heads": int, "d_ff": int, "enc_layers": int, "dec_layers": int,
    "conv_filters": str, "pool_stride": int, "highway_layers": int, "dropout": float,
    "max_positions": int,
    # optimisation
    "lr_factor": float, "warmup_steps": int, "beta1": float, "beta2": float, "eps": float,
    "label_smoothing": float, "max_updates": int, "accum_count": int, "token_budget": int,
    "eval_interval": int,
    # decoding
    "beam": int, "alpha": float,
}

MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"mode", "src_vocab", "tgt_vocab"}
OPT_KEYS = {f.name for f in fields(OptConfig)}

PRESETS = {
    "paper": {
        "opt": dict(lr_factor=2.0, warmup_steps=8000, label_smoothing=0.1, max_updates=100000,
                    accum_count=4, token_budget=6144, eval_interval=1000),
    },
    "desk": {
        "opt": dict(lr_factor=1.0, warmup_steps=400, label_smoothing=0.0, max_updates=2000,
                    accum_count=4, token_budget=1024, eval_interval=100),
    },
}

DEFAULTS = {"mode": "char-reduction-transformer", "preset": "desk", "seed": 13, "precision": "single",
            "bpe_ops": 20000, "char_vocab_size": 300, "resume": False}


def _bool(v):
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes", "on"):
        return True
    if str(v).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


def parse_value(key, raw):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return SCHEMA[key](raw)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {raw!r} for config key {key!r}") from None


def read_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc.strerror}") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        key = key.strip()
        out[key] = parse_value(key, value.strip())
    return out


def resolve(file_values, cli_values):
    """Defaults < config file < command line. ``None`` CLI values are ignored."""
    out = dict(DEFAULTS)
    for src in (file_values or {}, {k: v for k, v in (cli_values or {}).items() if v is not None}):
        for k, v in src.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            out[k] = SCHEMA[k](v) if isinstance(v, str) and SCHEMA[k] is not str else v
    if out["mode"] not in MODES:
        raise ConfigError(f"unknown mode {out['mode']!r}; expected one of {MODES}")
    if out["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {out['preset']!r}; expected one of {sorted(PRESETS)}")
    if out["precision"] not in ("single", "double"):
        raise ConfigError("precision must be 'single' or 'double'")
    return out


def model_config(run, src_vocab, tgt_vocab):
    base = (ModelConfig.full if run["preset"] == "paper" else ModelConfig.desk)(run["mode"], src_vocab, tgt_vocab)
    rec = base.to_record()
    for k in MODEL_KEYS:
        if k in run:
            rec[k] = str(run[k])
    return ModelConfig.from_record(rec)


def opt_config(run):
    kw = dict(PRESETS[run["preset"]]["opt"])
    for k in OPT_KEYS:
        if k in run:
            kw[k] = run[k]
    return OptConfig(**kw)


def dumps(run):
    return "".join(f"{k}={run[k]}\n" for k in sorted(run))

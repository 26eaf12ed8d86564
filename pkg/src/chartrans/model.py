"""Transformer translation models over the autodiff engine.

Three encoder front-ends share one decoder:

* ``bpe-transformer``: subword embeddings + positional encoding
* ``char-transformer``: character embeddings + positional encoding
* ``char-reduction-transformer``: character embeddings -> convolution bank
  (widths 1-8) -> ReLU -> max pooling (stride 5) -> 2 highway layers ->
  projection to ``d_model`` -> positional encoding

Parameters live in a flat ``dict`` (the parameter set) keyed by dotted path.
"""

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .tokenize import PAD

MODES = ("bpe-transformer", "char-transformer", "char-reduction-transformer")
FULL_FILTERS = {1: 200, 2: 200, 3: 250, 4: 250, 5: 300, 6: 300, 7: 300, 8: 300}
DESK_FILTERS = {w: 16 for w in range(1, 9)}
NEG_INF = -1e9


@dataclass
class ModelConfig:
    mode: str = "char-reduction-transformer"
    src_vocab: int = 300
    tgt_vocab: int = 300
    enc_emb: int = 128
    d_model: int = 512
    heads: int = 8
    d_ff: int = 2048
    enc_layers: int = 6
    dec_layers: int = 6
    conv_filters: dict = field(default_factory=lambda: dict(FULL_FILTERS))
    pool_stride: int = 5
    highway_layers: int = 2
    dropout: float = 0.0
    max_positions: int = 512

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown model mode {self.mode!r}; expected one of {MODES}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by {self.heads} heads")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal positions")
        if not self.reduces:
            self.conv_filters = {}
            self.enc_emb = self.d_model
            self.pool_stride = 1
            self.highway_layers = 0
        elif not self.conv_filters:
            raise ConfigError("char-reduction-transformer needs conv_filters")

    @property
    def reduces(self):
        return self.mode == "char-reduction-transformer"

    @property
    def conv_channels(self):
        return sum(self.conv_filters.values())

    @property
    def char_level(self):
        return self.mode != "bpe-transformer"

    @classmethod
    def full(cls, mode, src_vocab=300, tgt_vocab=300):
        reduces = mode == "char-reduction-transformer"
        return cls(mode=mode, src_vocab=src_vocab, tgt_vocab=tgt_vocab,
                   enc_emb=128 if reduces else 512, dropout=0.0 if mode != "bpe-transformer" else 0.1)

    @classmethod
    def desk(cls, mode, src_vocab=300, tgt_vocab=300):
        return cls(mode=mode, src_vocab=src_vocab, tgt_vocab=tgt_vocab, enc_emb=32, d_model=64,
                   heads=2, d_ff=128, enc_layers=2, dec_layers=2, conv_filters=dict(DESK_FILTERS),
                   dropout=0.0)

    # key=value record used inside checkpoints
    def to_record(self):
        out = {}
        for k, v in asdict(self).items():
            if k == "conv_filters":
                v = ",".join(f"{w}:{n}" for w, n in sorted(v.items()))
            out[k] = str(v)
        return out

    @classmethod
    def from_record(cls, rec):
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in rec.items():
            if k not in types:
                raise ConfigError(f"unknown model config key {k!r}")
            if k == "conv_filters":
                kw[k] = {int(a): int(b) for a, b in (item.split(":") for item in v.split(",") if item)}
            elif k == "mode":
                kw[k] = v
            elif k == "dropout":
                kw[k] = float(v)
            else:
                kw[k] = int(v)
        return cls(**kw)

    def with_vocab(self, src_vocab, tgt_vocab):
        return replace(self, src_vocab=src_vocab, tgt_vocab=tgt_vocab)


@dataclass
class EncoderOutput:
    states: T.Tensor       # B x L' x d_model
    pad_mask: np.ndarray   # B x L', True at padding


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def glorot_init(shape, rng):
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).

    Tensors of rank > 2 are viewed as a (prod(shape[:-1]), shape[-1]) matrix,
    so a (width, in, out) filter bank has fan_in = width * in.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2 or min(shape) < 1:
        raise DimensionError(f"glorot_init needs a rank>=2 shape with positive dims, got {shape}")
    fan_in, fan_out = int(np.prod(shape[:-1])), shape[-1]
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return T.Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def param_shapes(cfg):
    """Ordered (name, shape, kind) for every parameter; kind is 'w', 'b', 'gain' or 'gate'."""
    D, F = cfg.d_model, cfg.d_ff
    out = []

    def attn(prefix):
        # no key bias: it shifts every score of a query equally and softmax cancels it
        for n in ("q", "k", "v", "o"):
            out.append((f"{prefix}.w{n}", (D, D), "w"))
            if n != "k":
                out.append((f"{prefix}.b{n}", (D,), "b"))

    def ln(prefix):
        out.append((f"{prefix}.g", (D,), "gain"))
        out.append((f"{prefix}.b", (D,), "b"))

    def ffn(prefix):
        out.extend([(f"{prefix}.w1", (D, F), "w"), (f"{prefix}.b1", (F,), "b"),
                    (f"{prefix}.w2", (F, D), "w"), (f"{prefix}.b2", (D,), "b")])

    out.append(("enc.emb", (cfg.src_vocab, cfg.enc_emb), "w"))
    if cfg.reduces:
        C = cfg.conv_channels
        for w, n in sorted(cfg.conv_filters.items()):
            out.append((f"enc.conv.w{w}", (w, cfg.enc_emb, n), "w"))
            out.append((f"enc.conv.b{w}", (n,), "b"))
        for i in range(cfg.highway_layers):
            out.extend([(f"enc.hw{i}.wh", (C, C), "w"), (f"enc.hw{i}.bh", (C,), "b"),
                        (f"enc.hw{i}.wt", (C, C), "w"), (f"enc.hw{i}.bt", (C,), "gate")])
        out.extend([("enc.proj.w", (C, D), "w"), ("enc.proj.b", (D,), "b")])
    for i in range(cfg.enc_layers):
        attn(f"enc.layer{i}.attn")
        ln(f"enc.layer{i}.ln1")
        ffn(f"enc.layer{i}.ffn")
        ln(f"enc.layer{i}.ln2")
    out.append(("dec.emb", (cfg.tgt_vocab, D), "w"))
    for i in range(cfg.dec_layers):
        attn(f"dec.layer{i}.self")
        ln(f"dec.layer{i}.ln1")
        attn(f"dec.layer{i}.cross")
        ln(f"dec.layer{i}.ln2")
        ffn(f"dec.layer{i}.ffn")
        ln(f"dec.layer{i}.ln3")
    out.extend([("dec.out.w", (D, cfg.tgt_vocab), "w"), ("dec.out.b", (cfg.tgt_vocab,), "b")])
    return out


def init_params(cfg, seed=13):
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in param_shapes(cfg):
        if kind == "w":
            params[name] = glorot_init(shape, rng)
        else:
            value = {"b": 0.0, "gain": 1.0, "gate": -2.0}[kind]
            params[name] = T.Tensor(np.full(shape, value), requires_grad=True)
        params[name].name = name
    return params


def count_params(params):
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def positional_encoding(length, d_model):
    if d_model % 2:
        raise DataError(f"positional encoding needs an even d_model, got {d_model}")
    pos = np.arange(length)[:, None]
    rate = np.power(10000.0, -np.arange(0, d_model, 2) / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate)
    return T.Tensor(pe)


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def highway_forward(x, p):
    """``g * relu(x Wh + bh) + (1 - g) * x`` with ``g = sigmoid(x Wt + bt)``."""
    D = x.shape[-1]
    if p["wh"].shape != (D, D) or p["wt"].shape != (D, D):
        raise DimensionError(f"highway: input width {D} vs weights {p['wh'].shape}/{p['wt'].shape}")
    gate = T.sigmoid(T.linear(x, p["wt"], p["bt"]))
    h = T.relu(T.linear(x, p["wh"], p["bh"]))
    return x + gate * (h - x)


def reduce_pad_mask(pad_mask, stride):
    """A pooled position is padding only if every character under it is."""
    B, L = pad_mask.shape
    if L % stride:
        raise DataError(f"source length {L} is not a multiple of the pooling stride {stride}")
    return pad_mask.reshape(B, L // stride, stride).all(axis=2)


def reduce_source(src_ids, params, cfg, src_pad_mask=None):
    """Character ids (B x L) -> reduced states (B x L/stride x d_model) and reduced pad mask."""
    src_ids = np.asarray(src_ids)
    if src_pad_mask is None:
        src_pad_mask = src_ids == PAD
    B, L = src_ids.shape
    if L % cfg.pool_stride:
        raise DataError(f"source length {L} is not a multiple of the pooling stride {cfg.pool_stride}")
    emb = T.embedding_lookup(params["enc.emb"], src_ids)
    keep = (~src_pad_mask)[:, :, None].astype(T.default_dtype())
    emb = emb * T.Tensor(keep)  # pad positions behave like the zero padding at sequence ends
    maps = []
    for w in sorted(cfg.conv_filters):
        maps.append(T.conv1d_same(emb, params[f"enc.conv.w{w}"], w) + params[f"enc.conv.b{w}"])
    h = T.relu(T.concat(maps, axis=-1))
    h = T.maxpool1d(h, cfg.pool_stride)
    for i in range(cfg.highway_layers):
        h = highway_forward(h, _sub(params, f"enc.hw{i}"))
    out = T.linear(h, params["enc.proj.w"], params["enc.proj.b"])
    return out, reduce_pad_mask(src_pad_mask, cfg.pool_stride)


def _mask_bias(mask):
    return T.Tensor(np.where(mask, NEG_INF, 0.0))


def multihead_attention(query, key, value, mask, heads, p, return_weights=False):
    """Scaled dot-product attention over ``heads`` heads with output projection.

    ``mask`` is boolean and broadcastable to (B, heads, Lq, Lk); True marks a
    key position the query may not attend to.
    """
    B, Lq, D = query.shape
    Lk = key.shape[1]
    if D % heads:
        raise DimensionError(f"d_model {D} is not divisible by {heads} heads")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, (B, heads, Lq, Lk))
        except ValueError:
            raise DimensionError(f"attention mask {mask.shape} does not fit (B={B}, H={heads}, {Lq}, {Lk})") from None
    dk = D // heads

    def split(x, L):
        return T.transpose(T.reshape(x, (B, L, heads, dk)), (0, 2, 1, 3))

    q = split(T.linear(query, p["wq"], p["bq"]), Lq)
    k = split(T.linear(key, p["wk"]), Lk)
    v = split(T.linear(value, p["wv"], p["bv"]), Lk)
    scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(dk))
    if mask is not None:
        scores = scores + _mask_bias(mask)
    weights = T.softmax_lastdim(scores)
    ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (B, Lq, D))
    out = T.linear(ctx, p["wo"], p["bo"])
    return (out, weights) if return_weights else out


def feed_forward(x, p):
    return T.linear(T.relu(T.linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def _residual_norm(x, sub, p, cfg, rng, training):
    sub = T.dropout(sub, cfg.dropout, rng, training)
    return T.layer_norm(x + sub, p["g"], p["b"])


def encoder_forward(x, pad_mask, params, cfg, rng=None, training=False):
    """Post-norm self-attention + FFN stack over already embedded inputs."""
    key_mask = np.asarray(pad_mask)[:, None, None, :]
    for i in range(cfg.enc_layers):
        pre = f"enc.layer{i}"
        a = multihead_attention(x, x, x, key_mask, cfg.heads, _sub(params, pre + ".attn"))
        x = _residual_norm(x, a, _sub(params, pre + ".ln1"), cfg, rng, training)
        f = feed_forward(x, _sub(params, pre + ".ffn"))
        x = _residual_norm(x, f, _sub(params, pre + ".ln2"), cfg, rng, training)
    return EncoderOutput(x, np.asarray(pad_mask))


def _add_positions(x, cfg):
    L = x.shape[1]
    if L > cfg.max_positions:
        raise DataError(f"sequence of length {L} exceeds max_positions={cfg.max_positions}")
    return x + positional_encoding(L, x.shape[-1])


def encode_source(src_ids, params, cfg, src_pad_mask=None, rng=None, training=False):
    src_ids = np.asarray(src_ids)
    if src_pad_mask is None:
        src_pad_mask = src_ids == PAD
    if cfg.reduces:
        x, mask = reduce_source(src_ids, params, cfg, src_pad_mask)
    else:
        x = T.embedding_lookup(params["enc.emb"], src_ids) * math.sqrt(cfg.d_model)
        mask = src_pad_mask
    x = T.dropout(_add_positions(x, cfg), cfg.dropout, rng, training)
    return encoder_forward(x, mask, params, cfg, rng, training)


def causal_mask(L):
    return np.triu(np.ones((L, L), dtype=bool), k=1)


def decoder_forward(tgt_ids, enc, params, cfg, rng=None, training=False):
    """Decoder input ids (B x Lt, starting with BOS) -> vocabulary logits (B x Lt x V)."""
    tgt_ids = np.asarray(tgt_ids)
    Lt = tgt_ids.shape[1]
    x = T.embedding_lookup(params["dec.emb"], tgt_ids) * math.sqrt(cfg.d_model)
    x = T.dropout(_add_positions(x, cfg), cfg.dropout, rng, training)
    self_mask = causal_mask(Lt)[None, None]
    src_mask = enc.pad_mask[:, None, None, :]
    for i in range(cfg.dec_layers):
        pre = f"dec.layer{i}"
        a = multihead_attention(x, x, x, self_mask, cfg.heads, _sub(params, pre + ".self"))
        x = _residual_norm(x, a, _sub(params, pre + ".ln1"), cfg, rng, training)
        c = multihead_attention(x, enc.states, enc.states, src_mask, cfg.heads, _sub(params, pre + ".cross"))
        x = _residual_norm(x, c, _sub(params, pre + ".ln2"), cfg, rng, training)
        f = feed_forward(x, _sub(params, pre + ".ffn"))
        x = _residual_norm(x, f, _sub(params, pre + ".ln3"), cfg, rng, training)
    return T.linear(x, params["dec.out.w"], params["dec.out.b"])


def forward(batch, params, cfg, rng=None, training=False):
    """Teacher-forced logits for ``batch.tgt_ids[:, :-1]``."""
    if cfg.reduces and batch.src_ids.shape[1] % cfg.pool_stride:
        raise DataError("batch source length is not padded to the pooling stride; "
                        "was it built for a non-reduction model?")
    if batch.src_ids.max(initial=0) >= cfg.src_vocab:
        raise DataError("batch source ids exceed the model's source vocabulary")
    enc = encode_source(batch.src_ids, params, cfg, batch.src_pad_mask, rng, training)
    return decoder_forward(batch.tgt_ids[:, :-1], enc, params, cfg, rng, training)


class Seq2Seq:
    """Frozen model handle used by the decoders: encode once, score prefixes."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    @property
    def vocab_size(self):
        return self.cfg.tgt_vocab

    def encode(self, src_ids):
        src = np.asarray(src_ids, dtype=np.int64)[None]
        if self.cfg.reduces:
            src = np.pad(src, ((0, 0), (0, -src.shape[1] % self.cfg.pool_stride)), constant_values=PAD)
        with T.no_grad():
            return encode_source(src, self.params, self.cfg)

    def log_probs(self, enc, prefixes):
        """Next-token log-probabilities (k x V) for k equal-length prefixes."""
        prefixes = np.asarray(prefixes, dtype=np.int64)
        k = prefixes.shape[0]
        tiled = EncoderOutput(T.Tensor(np.repeat(enc.states.data, k, axis=0)),
                              np.repeat(enc.pad_mask, k, axis=0))
        with T.no_grad():
            logits = decoder_forward(prefixes, tiled, self.params, self.cfg)
            return T.log_softmax_lastdim(T.Tensor(logits.data[:, -1, :])).data

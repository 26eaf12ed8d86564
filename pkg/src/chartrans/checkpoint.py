"""Binary checkpoint files.

Layout, all integers little-endian::

    b"CTNMT1"
    u8   bytes per value (4 = float32, 8 = float64)
    u32  length, then UTF-8 config record ("key=value" lines)
    u32  parameter count, then per parameter:
         u32 name length, name bytes, u32 rank, rank x u32 dims, raw values
    u8   1 if training state follows, else 0; training state is
         u64 step, u32 accum, u64 rng seed, f64 best dev loss, then
         for each parameter (same order) the Adam first and second moments
    4 x (u32 length + UTF-8 text): source vocab, target vocab,
         source merges, target merges (empty text when absent)

Files are written to a temporary sibling and renamed into place.
"""

import os
import struct
import tempfile

import numpy as np

from .errors import CheckpointError, IOFailure

MAGIC = b"CTNMT1"


def _record_text(record):
    lines = []
    for k, v in record.items():
        v = str(v)
        if "\n" in v or "=" in k:
            raise CheckpointError(f"config entry {k!r} cannot be stored as a key=value line")
        lines.append(f"{k}={v}")
    return "\n".join(lines)


def _parse_record(text):
    rec = {}
    for line in text.split("\n"):
        if not line:
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        rec[k] = v
    return rec


def _text(buf, s):
    data = s.encode("utf-8")
    buf.append(struct.pack("<I", len(data)))
    buf.append(data)


def _array(buf, arr, dtype):
    buf.append(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def save(path, record, params, state=None, texts=("", "", "", ""), value_bytes=4):
    """Write a checkpoint; ``params`` maps names to arrays or tensors."""
    dtype = {4: np.float32, 8: np.float64}[value_bytes]
    buf = [MAGIC, struct.pack("<B", value_bytes)]
    _text(buf, _record_text(record))
    names = list(params)
    buf.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(getattr(params[name], "data", params[name]))
        raw = name.encode("utf-8")
        buf.append(struct.pack("<I", len(raw)))
        buf.append(raw)
        buf.append(struct.pack("<I", arr.ndim))
        buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        _array(buf, arr, dtype)
    if state is None:
        buf.append(struct.pack("<B", 0))
    else:
        buf.append(struct.pack("<B", 1))
        buf.append(struct.pack("<QIQd", state.step, state.accum, state.rng_seed, state.best_dev_loss))
        for name in names:
            _array(buf, state.opt_m[name], dtype)
            _array(buf, state.opt_v[name], dtype)
    for t in texts:
        _text(buf, t or "")
    atomic_write(path, b"".join(buf))


def atomic_write(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc.strerror}") from exc


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def array(self, shape, dtype):
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype).reshape(shape)


def load(path):
    """Returns ``(record, params, state_fields, texts)``; arrays are numpy."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc.strerror}") from exc
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic or version)")
    (value_bytes,) = r.unpack("<B")
    if value_bytes not in (4, 8):
        raise CheckpointError(f"unsupported precision flag {value_bytes}")
    dtype = np.float32 if value_bytes == 4 else np.float64
    record = _parse_record(r.text())
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I") if rank else ()
        params[name] = r.array(shape, dtype)
    state = None
    (has_state,) = r.unpack("<B")
    if has_state:
        step, accum, seed, best = r.unpack("<QIQd")
        m, v = {}, {}
        for name, arr in params.items():
            m[name] = r.array(arr.shape, dtype)
            v[name] = r.array(arr.shape, dtype)
        state = dict(step=step, accum=accum, rng_seed=seed, best_dev_loss=best, opt_m=m, opt_v=v)
    texts = tuple(r.text() for _ in range(4))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return record, params, state, texts

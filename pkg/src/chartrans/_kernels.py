"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with identical semantics. The numba path
is used unless ``CHARTRANS_DISABLE_NUMBA=1`` is set in the environment (or
numba cannot be imported). Both paths are exercised by the test-suite and
compared by ``benchmarks/bench_kernels.py``.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("CHARTRANS_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def unfold1d_numpy(xp, width):
    """(B, L+width-1, E) padded input -> (B, L, width*E) sliding windows."""
    B, Lp, E = xp.shape
    L = Lp - width + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, width, axis=1)  # B, L, E, w
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B, L, width * E)


def fold1d_numpy(gcols, width, E):
    """Adjoint of :func:`unfold1d_numpy`: scatter-add windows back."""
    B, L, _ = gcols.shape
    out = np.zeros((B, L + width - 1, E), dtype=gcols.dtype)
    for k in range(width):
        out[:, k:k + L, :] += gcols[:, :, k * E:(k + 1) * E]
    return out


def maxpool_forward_numpy(x, stride):
    """Max over disjoint windows along axis 1; returns values and in-window argmax."""
    B, L, C = x.shape
    win = x.reshape(B, L // stride, stride, C)
    idx = np.argmax(win, axis=2)  # first occurrence on ties
    out = np.take_along_axis(win, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return out, idx.astype(np.int64)


def maxpool_backward_numpy(g, idx, stride):
    B, Lr, C = g.shape
    gx = np.zeros((B, Lr, stride, C), dtype=g.dtype)
    np.put_along_axis(gx, idx[:, :, None, :], g[:, :, None, :], axis=2)
    return gx.reshape(B, Lr * stride, C)


def scatter_add_rows_numpy(table, ids, rows):
    """table[ids[i]] += rows[i] with repeated ids accumulating."""
    np.add.at(table, ids, rows)


def adam_update_numpy(p, g, m, v, scale, b1, a1, b2, a2, inv_c2, eps):
    """In-place Adam on flat arrays; see :func:`adam_coefficients` for the scalars."""
    m *= b1
    m += a1 * g
    v *= b2
    v += a2 * (g * g)
    denom = np.sqrt(v * inv_c2)
    denom += eps
    step = m / denom
    step *= scale
    p -= step


def adam_coefficients(dtype, lr, beta1, beta2, step, eps):
    """Scalars for ``adam_update`` cast to the parameter dtype so float32 stays float32."""
    t = dtype.type
    c1, c2 = 1.0 - beta1 ** step, 1.0 - beta2 ** step
    return (t(lr / c1), t(beta1), t(1.0 - beta1), t(beta2), t(1.0 - beta2), t(1.0 / c2), t(eps))


def levenshtein_numpy(a, b):
    """Unit-cost edit distance between two int arrays, one vectorised row at a time."""
    n, m = len(a), len(b)
    if n == 0:
        return m
    if m == 0:
        return n
    prev = np.arange(m + 1, dtype=np.int64)
    offs = np.arange(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        sub = prev[:-1] + (b != a[i - 1])
        tmp = np.empty(m + 1, dtype=np.int64)
        tmp[0] = i
        tmp[1:] = np.minimum(prev[1:] + 1, sub)
        # insertions chain left-to-right: row[j] = min_k tmp[k] + (j - k)
        prev = np.minimum.accumulate(tmp - offs) + offs
    return int(prev[m])


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def unfold1d_numba(xp, width):
        B, Lp, E = xp.shape
        L = Lp - width + 1
        out = np.empty((B, L, width * E), dtype=xp.dtype)
        for b in range(B):
            for t in range(L):
                for k in range(width):
                    for e in range(E):
                        out[b, t, k * E + e] = xp[b, t + k, e]
        return out

    @njit(cache=True)
    def fold1d_numba(gcols, width, E):
        B, L, _ = gcols.shape
        out = np.zeros((B, L + width - 1, E), dtype=gcols.dtype)
        for b in range(B):
            for t in range(L):
                for k in range(width):
                    for e in range(E):
                        out[b, t + k, e] += gcols[b, t, k * E + e]
        return out

    @njit(cache=True)
    def maxpool_forward_numba(x, stride):
        B, L, C = x.shape
        Lr = L // stride
        out = np.empty((B, Lr, C), dtype=x.dtype)
        idx = np.empty((B, Lr, C), dtype=np.int64)
        for b in range(B):
            for r in range(Lr):
                base = r * stride
                for c in range(C):
                    best = x[b, base, c]
                    arg = 0
                    for k in range(1, stride):
                        v = x[b, base + k, c]
                        if v > best:
                            best = v
                            arg = k
                    out[b, r, c] = best
                    idx[b, r, c] = arg
        return out, idx

    @njit(cache=True)
    def maxpool_backward_numba(g, idx, stride):
        B, Lr, C = g.shape
        gx = np.zeros((B, Lr * stride, C), dtype=g.dtype)
        for b in range(B):
            for r in range(Lr):
                for c in range(C):
                    gx[b, r * stride + idx[b, r, c], c] = g[b, r, c]
        return gx

    @njit(cache=True)
    def scatter_add_rows_numba(table, ids, rows):
        D = table.shape[1]
        for i in range(ids.shape[0]):
            r = ids[i]
            for d in range(D):
                table[r, d] += rows[i, d]

    @njit(cache=True)
    def adam_update_numba(p, g, m, v, scale, b1, a1, b2, a2, inv_c2, eps):
        for i in range(p.shape[0]):
            gi = g[i]
            mi = b1 * m[i] + a1 * gi
            vi = b2 * v[i] + a2 * (gi * gi)
            m[i] = mi
            v[i] = vi
            p[i] -= scale * mi / (np.sqrt(vi * inv_c2) + eps)

    @njit(cache=True)
    def levenshtein_numba(a, b):
        n, m = len(a), len(b)
        if n == 0:
            return m
        if m == 0:
            return n
        prev = np.arange(m + 1)
        cur = np.empty(m + 1, dtype=np.int64)
        for i in range(1, n + 1):
            cur[0] = i
            ai = a[i - 1]
            for j in range(1, m + 1):
                cost = 0 if ai == b[j - 1] else 1
                v = prev[j - 1] + cost
                if prev[j] + 1 < v:
                    v = prev[j] + 1
                if cur[j - 1] + 1 < v:
                    v = cur[j - 1] + 1
                cur[j] = v
            prev, cur = cur, prev
        return prev[m]


def _pick(name):
    if USE_NUMBA:
        return globals()[name + "_numba"]
    return globals()[name + "_numpy"]


unfold1d = _pick("unfold1d")
fold1d = _pick("fold1d")
maxpool_forward = _pick("maxpool_forward")
maxpool_backward = _pick("maxpool_backward")
scatter_add_rows = _pick("scatter_add_rows")
adam_update = _pick("adam_update")
_levenshtein_impl = _pick("levenshtein")


def levenshtein_ids(a, b):
    return int(_levenshtein_impl(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)))


def backend():
    return "numba" if USE_NUMBA else "numpy"

"""Time each hot kernel under numba and pure numpy, plus one training update per backend.

    python benchmarks/bench_kernels.py [--repeat 20] [--no-update]

Kernel rows call both implementations directly in this process. The update
rows run a desk-size CharTransformer update in a subprocess with and without
CHARTRANS_DISABLE_NUMBA=1, since the backend is fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from chartrans import _kernels as K

UPDATE_SNIPPET = """
import time
from chartrans import _kernels
from chartrans.model import ModelConfig, init_params
from chartrans.train import OptConfig, TrainState, synthetic_char_batches, train_update
cfg = ModelConfig.desk("char-reduction-transformer", 300, 300)
params = init_params(cfg, 13)
batches = synthetic_char_batches(4, 8, 200, seed=13)
st, opt = TrainState(), OptConfig()
train_update(batches, params, cfg, st, opt)
t0 = time.perf_counter()
for _ in range({n}):
    train_update(batches, params, cfg, st, opt)
print(_kernels.backend(), (time.perf_counter() - t0) / {n})
"""


def kernel_cases(rng):
    B, L, E, w = 8, 450, 128, 5
    xp = rng.standard_normal((B, L + w - 1, E)).astype(np.float32)
    gcols = rng.standard_normal((B, L, w * E)).astype(np.float32)
    h = rng.standard_normal((B, L, 512)).astype(np.float32)
    _, idx = K.maxpool_forward_numpy(h, 5)
    gp = rng.standard_normal((B, L // 5, 512)).astype(np.float32)
    table = np.zeros((300, 128), np.float32)
    ids = rng.integers(0, 300, size=B * L)
    rows = rng.standard_normal((B * L, 128)).astype(np.float32)
    n = 2_000_000
    p, g = rng.standard_normal(n).astype(np.float32), rng.standard_normal(n).astype(np.float32)
    m, v = np.zeros(n, np.float32), np.zeros(n, np.float32)
    coef = K.adam_coefficients(np.dtype(np.float32), 1e-3, 0.9, 0.998, 10, 1e-9)
    a, b = rng.integers(0, 30, size=400), rng.integers(0, 30, size=420)
    return {
        "unfold1d": (xp, w),
        "fold1d": (gcols, w, E),
        "maxpool_forward": (h, 5),
        "maxpool_backward": (gp, idx, 5),
        "scatter_add_rows": (table, ids, rows),
        "adam_update": (p, g, m, v, *coef),
        "levenshtein": (a, b),
    }


def time_call(fn, args, repeat):
    fn(*args)  # compile / warm caches
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def update_seconds(disable, n):
    env = dict(os.environ)
    env.pop("CHARTRANS_DISABLE_NUMBA", None)
    if disable:
        env["CHARTRANS_DISABLE_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", UPDATE_SNIPPET.format(n=n)], env=env, check=True,
                         capture_output=True, text=True).stdout.split()
    return out[0], float(out[1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--updates", type=int, default=5)
    ap.add_argument("--no-update", action="store_true")
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, case in kernel_cases(rng).items():
        # adam_update and scatter_add_rows mutate their inputs; timing is unaffected
        t_np = time_call(getattr(K, name + "_numpy"), case, args.repeat)
        t_nb = time_call(getattr(K, name + "_numba"), case, args.repeat)
        print(f"{name:<18}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>8.1f}x")

    if not args.no_update:
        print(f"\n{'desk update':<18}{'sec':>10}")
        for disable in (True, False):
            backend, sec = update_seconds(disable, args.updates)
            print(f"{backend:<18}{sec:>10.3f}")


if __name__ == "__main__":
    main()

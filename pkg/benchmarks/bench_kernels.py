"""Time the numba and pure-numpy paths of every hot kernel.

    python3 benchmarks/bench_kernels.py            # kernels only
    python3 benchmarks/bench_kernels.py --train    # also a short training run per backend

Kernel timings compare both implementations in one process (numba kernels
are compiled regardless of NCTJ_DISABLE_NUMBA). The training comparison
spawns one subprocess per backend because the flag is read at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from nctrojan import _accel, kernels


def _cases(rng):
    a = rng.standard_normal((256, 128)).astype(np.float32)
    b = rng.standard_normal((128, 64)).astype(np.float32)
    x = rng.standard_normal((32, 8, 8, 8)).astype(np.float32)
    k = rng.standard_normal((16, 8, 3, 3)).astype(np.float32)
    gout = rng.standard_normal((32, 16, 8, 8)).astype(np.float32)
    state = np.array([1, 2, 3, 4], dtype=np.uint64)
    draws = np.empty(4096, dtype=np.uint64)
    u = rng.random(4999)
    feats = rng.standard_normal((800, 32))
    labels = rng.integers(0, 4, 800)
    means = np.stack([feats[labels == c].mean(axis=0) for c in range(4)])
    counts = np.bincount(labels, minlength=4).astype(np.float64)

    return [
        ("matmul 256x128 @ 128x64", kernels.matmul_numba, kernels.matmul_numpy, (a, b)),
        ("conv2d forward 32x8x8x8 -> 16", kernels.conv2d_forward_numba,
         kernels.conv2d_forward_numpy, (x, k)),
        ("conv2d backward 32x8x8x8 -> 16", kernels.conv2d_backward_numba,
         kernels.conv2d_backward_numpy, (x, k, gout)),
        ("xoshiro256** 4096 draws", kernels.xoshiro_fill_numba, kernels.xoshiro_fill_python,
         (state, draws)),
        ("fisher-yates n=5000", lambda p, v: kernels.fisher_yates_numba(p.copy(), v),
         lambda p, v: kernels.fisher_yates_python(p.copy(), v), (np.arange(5000), u)),
        ("within-class scatter 800x32, K=4", kernels.within_scatter_numba,
         kernels.within_scatter_numpy, (feats, labels, means, counts)),
    ]


def best_of(fn, args, repeat):
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def bench_kernels(repeat):
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    print(f"{'kernel':36s} {'numba':>12s} {'numpy':>12s} {'speedup':>9s}")
    for name, fast, slow, args in _cases(np.random.default_rng(0)):
        fast(*args)  # trigger JIT compilation outside the timed region
        t_fast = best_of(fast, args, repeat)
        t_slow = best_of(slow, args, repeat)
        print(f"{name:36s} {t_fast * 1e3:10.3f}ms {t_slow * 1e3:10.3f}ms {t_slow / t_fast:8.1f}x")


TRAIN_SNIPPET = """
import time
from nctrojan.harness.desk import DeskSeed
from nctrojan import _accel
desk = DeskSeed(0)
start = time.perf_counter()
desk.trojaned()
print(_accel.backend_name(), time.perf_counter() - start)
"""


def bench_training():
    print("\nheadline trojan training, seed 0, 200 epochs")
    for disable in ("0", "1"):
        env = dict(os.environ, NCTJ_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, check=True,
                             capture_output=True, text=True).stdout.split()
        print(f"  {out[0]:6s} {float(out[1]):7.2f}s")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--train", action="store_true", help="also time a full headline training run")
    args = parser.parse_args()
    bench_kernels(args.repeat)
    if args.train:
        bench_training()


if __name__ == "__main__":
    main()

"""Compare the compiled and numpy dense-layer kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--sizes 16x2x16 64x16x16 256x64x64]

Kernel timings call both backends directly in one process; the end-to-end
timing runs a small training job once per backend in a subprocess so each
picks its backend at import.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dpfed import _fallback, kernels

RUN_SNIPPET = """
import time
from dpfed.config import parse_config
from dpfed.federation import run_training
cfg = parse_config('''
master_seed = 1
[data]
samples_per_class = 150
[model]
hidden = [16, 16]
[training]
rounds = 36
''')
t = time.perf_counter()
run_training(cfg)
print(time.perf_counter() - t)
"""


def parse_size(text: str) -> tuple[int, int, int]:
    n, fan_in, fan_out = (int(v) for v in text.lower().split("x"))
    return n, fan_in, fan_out


def best_of(fn, repeat: int) -> float:
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeat, number=number)) / number


def bench_kernels(sizes, repeat):
    if not kernels.compiled_available():
        print("compiled extension not built; only the numpy backend is available")
        return
    from dpfed import _core

    rng = np.random.default_rng(0)
    print(f"{'shape (n x in x out)':>22} {'kernel':>9} {'numpy us':>10} {'cython us':>10} {'speedup':>8}")
    for n, fan_in, fan_out in sizes:
        x = rng.standard_normal((n, fan_in))
        w = rng.standard_normal((fan_in, fan_out))
        b = rng.standard_normal(fan_out)
        dz = rng.standard_normal((n, fan_out))
        cases = {
            "forward": (lambda m: m.dense_forward(x, w, b)),
            "backward": (lambda m: m.dense_backward(x, dz, w, True)),
        }
        for name, call in cases.items():
            slow = best_of(lambda: call(_fallback), repeat)
            fast = best_of(lambda: call(_core), repeat)
            label = f"{n}x{fan_in}x{fan_out}"
            print(f"{label:>22} {name:>9} {slow * 1e6:10.1f} {fast * 1e6:10.1f} {slow / fast:7.1f}x")


def bench_training():
    print("\nend-to-end: 36 rounds, 3 clients, 240 training samples, hidden [16, 16]")
    for backend in ("python", "cython"):
        if backend == "cython" and not kernels.compiled_available():
            continue
        env = dict(os.environ, DPFED_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", RUN_SNIPPET], env=env, capture_output=True, text=True, check=True)
        print(f"  {backend:>7}: {float(out.stdout):.3f} s")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--sizes", nargs="+", type=parse_size, default=[(16, 2, 16), (16, 16, 16), (64, 16, 16), (256, 64, 64)])
    parser.add_argument("--skip-training", action="store_true")
    args = parser.parse_args(argv)
    print(f"active backend: {kernels.BACKEND}\n")
    bench_kernels(args.sizes, args.repeat)
    if not args.skip_training:
        bench_training()
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Time the compiled and pure-Python kernel backends on the same inputs.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from bcflsim import kernels


def cases(rng):
    d = 122_570
    g = np.abs(rng.normal(size=d))
    draws = rng.exponential(1.0, size=(65_536, 50))
    delays = np.full((1, 50), 0.02)
    idx = np.sort(rng.choice(d, size=d // 100, replace=False))
    vals = rng.normal(size=idx.shape[0])
    acc = np.zeros(d)
    return {
        "topk d=122570 k=1%": lambda b: b.topk_indices(g, d // 100),
        "topk d=122570 k=50%": lambda b: b.topk_indices(g, d // 2),
        "race_scan 65536x50": lambda b: b.race_scan(draws, delays),
        "scatter 50 updates k=1%": lambda b: [b.scatter_accumulate(acc, idx, vals) for _ in range(50)],
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = {name: kernels.get_backend(name) for name in kernels.BACKENDS}
    print(f"{'kernel':28s}" + "".join(f"{n:>14s}" for n in backends) + f"{'speedup':>10s}")
    for label, fn in cases(rng).items():
        times = {}
        for name, b in backends.items():
            times[name] = min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat))
        row = f"{label:28s}" + "".join(f"{times[n] * 1e3:12.2f}ms" for n in backends)
        if "compiled" in times:
            row += f"{times['python'] / times['compiled']:9.1f}x"
        print(row)


if __name__ == "__main__":
    main()

"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel and backend with the best-of-N wall time.
"""

import argparse
import timeit

import numpy as np

from lobit import kernels
from lobit.bitpack import group_size, word_bits
from lobit.metrics import Rng


def cases(rng):
    w = rng.normal((128, 128)) * 0.1
    s = np.full(128, 0.05)
    g = rng.normal((128, 128))
    out = []
    for levels in (3, 5, 17):
        z = np.full(128, levels // 2, dtype=np.int64)
        codes = rng.integers(levels, 1_000_000)
        G, W = group_size(levels), word_bits(levels)
        out.append((f"quantize 128x128 L={levels}", lambda m, z=z, L=levels: m.quantize_codes(w, s, z, L)))
        out.append((f"ste 128x128 L={levels}", lambda m, z=z, L=levels: m.ste_grads(g, w, s, z, L)))
        out.append((f"pack 1e6 L={levels}", lambda m, c=codes, L=levels, G=G, W=W: m.pack_groups(c, L, G, W)))
        packed = np.frombuffer(kernels.pack_groups(codes, levels, G, W), dtype=np.uint8)
        out.append((f"unpack 1e6 L={levels}",
                    lambda m, p=packed, L=levels, G=G, W=W: m.unpack_groups(p, 1_000_000, L, G, W)))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    names = sorted(backends)
    print(f"{'kernel':28s}" + "".join(f"{n:>12s}" for n in names) + ("    speedup" if len(names) > 1 else ""))
    for label, fn in cases(Rng(0)):
        times = {}
        for n in names:
            mod = backends[n]
            times[n] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        row = f"{label:28s}" + "".join(f"{times[n] * 1e3:10.2f}ms" for n in names)
        if "cython" in times:
            row += f"  {times['python'] / times['cython']:8.1f}x"
        print(row)


if __name__ == "__main__":
    main()

"""Time the compiled fast-weight kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Shapes are (G, T, dh) with G = batch x channels x heads.  The first rows
match the training workloads (synthetic task, ETTh1); the last stresses long
sequences where the O(T^2) masked-matmul fallback loses to the O(T d^2) scan.
The ``dispatch`` column is what the package actually calls (per-shape choice).
"""
import argparse
import json
import timeit

import numpy as np

from samovar import kernels

SHAPES = [
    ("synthetic batch", 128, 128, 16),
    ("etth1 batch", 896, 22, 16),
    ("long sequence", 8, 2048, 16),
    ("wide head", 64, 128, 64),
]


def bench(fn, args, repeat):
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    impls = dict(kernels.backends())
    impls["dispatch"] = kernels
    if "compiled" not in impls:
        print("compiled extension not built; only the fallback is timed")
    rows = []
    print(f"{'workload':18s} {'dtype':8s} {'pass':4s} " + " ".join(f"{n:>10s}" for n in impls) + "   dispatch speedup")
    for name, G, T, dh in SHAPES:
        for dtype in (np.float32, np.float64):
            rng = np.random.default_rng(0)
            q, k, v, gy = (rng.standard_normal((G, T, dh)).astype(dtype) for _ in range(4))
            for pass_name, call in (("fwd", lambda m: (m.causal_linear_attention_fwd, (q, k, v))),
                                    ("bwd", lambda m: (m.causal_linear_attention_bwd, (q, k, v, gy)))):
                times = {n: bench(*call(m), args.repeat) for n, m in impls.items()}
                speed = times["python"] / times["dispatch"]
                rows.append({"workload": name, "G": G, "T": T, "dh": dh, "dtype": np.dtype(dtype).name,
                             "pass": pass_name, "seconds": times, "speedup": speed})
                print(f"{name:18s} {np.dtype(dtype).name:8s} {pass_name:4s} "
                      + " ".join(f"{times[n] * 1e3:9.2f}ms" for n in impls) + f"   {speed:6.2f}x")
    print(f"import-time backend: {kernels.BACKEND}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()

"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from cicf_lab import _pykernels

try:
    from cicf_lab import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    points = rng.standard_normal((20_000, 16))
    centroids = rng.standard_normal((21, 16))
    G = rng.standard_normal((600, 200))
    idx = np.ascontiguousarray(np.argsort(rng.random((20_000, 600)), axis=1)[:, :16])
    mu = G.mean(axis=0)
    return {
        "assign_nearest (20000 x 16, K=21)": ("assign_nearest", (points, centroids)),
        "batch_mean_sq_errors (20000 trials, M=16, P=200)": ("batch_mean_sq_errors", (G, idx, mu)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = {"numpy": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'kernel':52s} " + " ".join(f"{b:>10s}" for b in backends) + "   speedup")
    for name, (fn, inputs) in cases(rng).items():
        times = {}
        outs = {}
        for b, mod in backends.items():
            f = getattr(mod, fn)
            outs[b] = f(*inputs)
            times[b] = min(timeit.repeat(lambda: f(*inputs), number=1, repeat=args.repeat))
        if "cython" in outs:
            ref, got = outs["numpy"], outs["cython"]
            if isinstance(ref, tuple):
                assert np.array_equal(ref[0], got[0])
            else:
                np.testing.assert_allclose(ref, got, rtol=1e-12)
        speed = times["numpy"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:52s} " + " ".join(f"{times[b] * 1e3:8.2f}ms" for b in backends)
              + f"   {speed:6.2f}x")


if __name__ == "__main__":
    main()

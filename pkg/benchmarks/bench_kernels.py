"""Time the numba and pure-numpy per-point kernels on the same inputs.

    python3 benchmarks/bench_kernels.py --n 2000 --m 20 --q 3 --d 5

Both implementations are imported directly, so the DVGP_NUMBA flag does not
matter here. Results are checked for agreement before timing.
"""
import argparse
import timeit

import numpy as np

from dvgp._kernels import StatsLayout, _numba, _numpy


def make_inputs(n, m, q, d, seed):
    rng = np.random.default_rng(seed)
    return dict(Y=rng.standard_normal((n, d)), mu=rng.standard_normal((n, q)),
                s=rng.uniform(0.05, 1.0, (n, q)), Z=rng.standard_normal((m, q)),
                sf2=1.3, alpha=rng.uniform(0.3, 2.0, q))


def numpy_partials(a):
    rows = _numpy.point_contributions(a["Y"], a["mu"], a["s"], a["Z"], a["sf2"], a["alpha"], True)
    width = StatsLayout(a["Z"].shape[0], a["Y"].shape[1], a["Z"].shape[1]).width
    return _numpy.grow_rows(np.zeros((0, width)), rows)


def numba_partials(a):
    P, status = _numba.shard_partials(a["Y"], a["mu"], a["s"], a["Z"], a["sf2"], a["alpha"],
                                      True, 256)
    assert status == 0
    return P


def local(impl, a, G2, GB):
    return impl.local_grads(a["Y"], a["mu"], a["s"], a["Z"], a["sf2"], a["alpha"], G2, GB)


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--m", type=int, default=20)
    ap.add_argument("--q", type=int, default=3)
    ap.add_argument("--d", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    a = make_inputs(args.n, args.m, args.q, args.d, args.seed)
    rng = np.random.default_rng(args.seed + 1)
    G2 = rng.standard_normal((args.m, args.m))
    G2 = G2 + G2.T
    GB = rng.standard_normal((args.m, args.d))

    # warm the JIT and compare outputs
    sums_np = np.array([sum(sorted(c, key=abs)) for c in numpy_partials(a).T])
    sums_nb = np.array([sum(sorted(c, key=abs)) for c in numba_partials(a).T])
    assert np.allclose(sums_np, sums_nb, rtol=1e-10, atol=1e-12), "backends disagree"
    for x, y in zip(local(_numpy, a, G2, GB), local(_numba, a, G2, GB)):
        assert np.allclose(x, y, rtol=1e-10, atol=1e-12), "backends disagree"

    print(f"n={args.n} m={args.m} q={args.q} d={args.d}  best of {args.repeat}")
    print(f"{'kernel':24s}{'numpy ms':>12s}{'numba ms':>12s}{'speedup':>10s}")
    cases = [("shard_partials", lambda: numpy_partials(a), lambda: numba_partials(a)),
             ("local_grads", lambda: local(_numpy, a, G2, GB), lambda: local(_numba, a, G2, GB))]
    for name, f_np, f_nb in cases:
        t_np = best_of(f_np, args.repeat)
        t_nb = best_of(f_nb, args.repeat)
        print(f"{name:24s}{1e3 * t_np:12.2f}{1e3 * t_nb:12.2f}{t_np / t_nb:10.1f}x")


if __name__ == "__main__":
    main()

"""Time one local-training epoch with the numba and pure-numpy backends.

    python3 benchmarks/bench_kernels.py [--n 2000] [--repeats 3]

Both backends run on the same data and parameters; the script also reports
the largest parameter difference between them after one epoch.
"""

import argparse
import time

import numpy as np

from noisyfed import _kernels
from noisyfed.nn import augment, epoch_order, init_mlp


def time_epoch(use_numba, params0, dims, X, y, order, batch, repeats):
    best = float("inf")
    out = None
    for _ in range(repeats):
        params = params0.copy()
        t0 = time.perf_counter()
        _kernels.train_epoch(params, dims, True, X, y, order, 0.1, batch, use_numba=use_numba)
        best = min(best, time.perf_counter() - t0)
        out = params
    return best, out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--n", type=int, default=2000, help="examples per epoch")
    parser.add_argument("--dims", default="785,64,32,10")
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args(argv)

    dims = tuple(int(d) for d in args.dims.split(","))
    rng = np.random.default_rng(0)
    X = np.ascontiguousarray(augment(rng.random((args.n, dims[0] - 1))))
    y = rng.integers(0, dims[-1], args.n)
    model = init_mlp(dims, 0)
    order = epoch_order(args.n, 0, 0)
    params0 = np.array(model.params)

    print(f"dims={dims} n={args.n} batch={args.batch} best of {args.repeats}")
    t_np, p_np = time_epoch(False, params0, model.dims_array, X, y, order, args.batch, args.repeats)
    print(f"numpy : {t_np * 1e3:9.2f} ms/epoch")
    if not _kernels.NUMBA_AVAILABLE:
        print("numba : not installed")
        return
    t0 = time.perf_counter()
    time_epoch(True, params0, model.dims_array, X[:args.batch], y[:args.batch],
               np.arange(args.batch), args.batch, 1)
    print(f"numba compile/load: {time.perf_counter() - t0:.2f} s")
    t_nb, p_nb = time_epoch(True, params0, model.dims_array, X, y, order, args.batch, args.repeats)
    print(f"numba : {t_nb * 1e3:9.2f} ms/epoch  ({t_np / t_nb:.2f}x vs numpy)")
    print(f"max |param diff| after one epoch: {np.max(np.abs(p_np - p_nb)):.2e}")


if __name__ == "__main__":
    main()

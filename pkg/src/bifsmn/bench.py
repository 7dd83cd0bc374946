"""Median-timing harness comparing BGEMM backends with a naive float loop."""
import statistics
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .binarize import pack, unpack
from .bitkernel import BACKENDS, KernelConfig, bgemm_int
from .errors import ConfigError, IntegrityError


def naive_matmul_fp(a, bt):
    """Pure-Python triple loop ``a @ bt.T`` over float lists."""
    a = a.tolist()
    bt = bt.tolist()
    out = []
    for row in a:
        out_row = []
        for col in bt:
            s = 0.0
            for x, y in zip(row, col):
                s += x * y
            out_row.append(s)
        out.append(out_row)
    return np.asarray(out, dtype=np.float32)


def _median_time(fn, repeat, parallel):
    def once(_):
        t0 = time.perf_counter()
        fn()
        return time.perf_counter() - t0

    if parallel and repeat > 1:
        with ThreadPoolExecutor() as pool:
            times = list(pool.map(once, range(repeat)))
    else:
        times = [once(i) for i in range(repeat)]
    return statistics.median(times)


def run_benchmark(sizes, backends=("reference", "blocked"), repeat=3, seed=0, parallel=False):
    """Time each backend on random ±1 operands; returns a list of row dicts.

    ``sizes`` holds ``(m, n, k)``: an ``m x k`` operand times the transpose
    of an ``n x k`` operand. All backends must agree exactly with each other
    and with a float reference before anything is timed.
    """
    for name in backends:
        if name not in BACKENDS:
            raise ConfigError(f"unknown backend {name!r}; choose from {BACKENDS}")
        KernelConfig(backend=name).validate()
    if repeat < 1:
        raise ConfigError("repeat must be >= 1")
    rng = np.random.default_rng(seed)
    rows = []
    for m, n, k in sizes:
        a = pack(rng.choice([-1.0, 1.0], size=(m, k)))
        b = pack(rng.choice([-1.0, 1.0], size=(n, k)))
        fa, fb = unpack(a), unpack(b)
        expected = (fa.astype(np.float64) @ fb.T.astype(np.float64)).astype(np.int64)
        cfgs = {name: KernelConfig(backend=name) for name in backends}
        for name, cfg in cfgs.items():
            if not np.array_equal(bgemm_int(a, b, cfg), expected):
                raise IntegrityError(f"backend {name} disagrees with the reference product at {m}x{n}x{k}")
        t_naive = _median_time(lambda: naive_matmul_fp(fa, fb), repeat, parallel)
        rows.append(dict(m=m, n=n, k=k, backend="naive-fp", median_s=t_naive, speedup=1.0))
        for name, cfg in cfgs.items():
            t = _median_time(lambda: bgemm_int(a, b, cfg), repeat, parallel)
            rows.append(dict(m=m, n=n, k=k, backend=name, median_s=t, speedup=t_naive / t))
    return rows

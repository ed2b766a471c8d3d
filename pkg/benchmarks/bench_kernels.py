"""Compare the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``. Each line
reports the median wall time per call for both backends, their ratio, and the
largest absolute difference between their outputs.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from smdlab import _kernels_py
from smdlab.gmm import grid_mixture

try:
    from smdlab import _kernels
except ImportError:  # extension not built
    _kernels = None


def _median_ms(fn, args, repeat: int) -> float:
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return 1000.0 * statistics.median(times)


def _fresh(inputs):
    return tuple(a.copy() if isinstance(a, np.ndarray) else a for a in inputs)


def _as_tuple(r):
    return r if isinstance(r, tuple) else (r,)


def cases(rng: np.random.Generator):
    a = 3.0 * rng.standard_normal((256, 128))
    scale = 0.1 * rng.standard_normal((256, 128))
    shift = 0.1 * rng.standard_normal((256, 128))
    g = rng.standard_normal((256, 128))
    act = a / (1.0 + np.exp(-a))
    means, prec_chol, log_coef = (np.ascontiguousarray(v) for v in grid_mixture(7, 2.0, 0.1).packed())
    x = 6.0 * rng.standard_normal((10000, 2))
    adam = [rng.standard_normal(100_000) for _ in range(3)] + [rng.uniform(0.0, 1.0, 100_000)]
    return {
        "silu 256x128": ("silu", (a,)),
        "silu_film 256x128": ("silu_film", (a, scale, shift)),
        "silu_grad 256x128": ("silu_grad", (a, g)),
        "silu_film_grad 256x128": ("silu_film_grad", (a, act, scale, g)),
        "mixture_logpdf n=1e4 K=49 D=2": ("mixture_logpdf", (x, means, prec_chol, log_coef)),
        "adam_update n=1e5": ("adam_update", (*adam, 1e-3, 0.9, 0.999, 0.1, 0.01, 1e-8)),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not available; build with pip install -e . first")
        return
    print(f"{'kernel':32s} {'cython ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max|diff|':>10s}")
    for label, (name, inputs) in cases(np.random.default_rng(0)).items():
        fc, fp = getattr(_kernels, name), getattr(_kernels_py, name)
        tc = _median_ms(fc, _fresh(inputs), args.repeat)
        tp = _median_ms(fp, _fresh(inputs), args.repeat)
        if name == "adam_update":
            # in-place kernel: compare the updated buffers after one call each
            ci, pi = _fresh(inputs), _fresh(inputs)
            fc(*ci)
            fp(*pi)
            outs = (tuple(ci[i] for i in (0, 2, 3)), tuple(pi[i] for i in (0, 2, 3)))
        else:
            outs = (_as_tuple(fc(*inputs)), _as_tuple(fp(*inputs)))
        diff = max(float(np.max(np.abs(u - v))) for u, v in zip(*outs))
        print(f"{label:32s} {tc:10.3f} {tp:10.3f} {tp / tc:8.2f} {diff:10.2e}")


if __name__ == "__main__":
    main()

"""Time the compiled kernels against the NumPy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from unipact.kernels import BACKEND, _pykernels

try:
    from unipact.kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x = rng.standard_normal((64, 128, 128)).astype(np.float32)
    t = np.tanh(x)
    g = rng.standard_normal(x.shape).astype(np.float32)
    gamma = np.ones(128, np.float32)
    beta = np.zeros(128, np.float32)
    s = rng.standard_normal((8, 4, 128, 128)).astype(np.float32)
    causal = np.tril(np.ones((128, 128), bool))
    p = np.full((1 << 16,), 0.5, np.float32)
    grad = rng.standard_normal(p.shape).astype(np.float32)
    scores = rng.random(1000)
    group = np.argsort(np.argsort(scores)).astype(np.int64)
    is_pos = (rng.random(1000) < 0.3).astype(np.uint8)
    idx = rng.integers(0, 1000, (200, 1000)).astype(np.int64)

    def adam(k):
        m, v = np.zeros_like(p), np.zeros_like(p)
        return lambda: k.adam_update(p.copy(), grad, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)

    return {
        "gelu_forward": lambda k: (lambda: k.gelu_forward(x)),
        "gelu_backward": lambda k: (lambda: k.gelu_backward(x, t, g)),
        "layer_norm_forward": lambda k: (lambda: k.layer_norm_forward(x.reshape(-1, 128), gamma, beta, 1e-5)),
        "softmax_rows(causal)": lambda k: (lambda: k.softmax_rows(s, causal)),
        "adam_update": adam,
        "bootstrap_aurocs(200x1000)": lambda k: (lambda: k.bootstrap_aurocs(group, is_pos, 1000, idx)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"active backend: {BACKEND}")
    print(f"{'kernel':<28} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, make in cases(rng).items():
        py = min(timeit.repeat(make(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:<28} {py:>10.2f} {'n/a':>10} {'':>8}")
            continue
        cy = min(timeit.repeat(make(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<28} {py:>10.2f} {cy:>10.2f} {py / cy:>7.2f}x")


if __name__ == "__main__":
    main()

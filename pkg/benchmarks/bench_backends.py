"""Compare the compiled and numpy convolution kernels.

Times forward and both backward kernels on representative layer shapes, then
a full fused forward pass of a 16-channel, 4-block network, once per backend.

    python benchmarks/bench_backends.py [--repeats 5] [--json out.json]
"""
import argparse
import json
import statistics
import time

import numpy as np

from repvsr import backend
from repvsr import metrics as M
from repvsr import network as N

# (label, c_in, c_out, k, h, w)
SHAPES = [
    ("head 3x3 3->16", 3, 16, 3, 180, 320),
    ("fused block 3x3 16->16", 16, 16, 3, 180, 320),
    ("expand 1x1 16->64", 16, 64, 1, 180, 320),
    ("spatial 3x3 64->64", 64, 64, 3, 90, 160),
    ("patch 3x3 16->16", 16, 16, 3, 24, 24),
]


def _median_ms(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    return statistics.median(times)


def bench_kernels(name, repeats, dtype=np.float32):
    k = backend.use(name)
    rng = np.random.default_rng(0)
    rows = []
    for label, ci, co, ks, h, w in SHAPES:
        x = rng.standard_normal((1, ci, h, w)).astype(dtype)
        wt = rng.standard_normal((co, ci, ks, ks)).astype(dtype)
        g = rng.standard_normal((1, co, h, w)).astype(dtype)
        pad = ks // 2
        rows.append({
            "backend": name, "layer": label,
            "forward_ms": _median_ms(lambda: k.conv2d_forward(x, wt, pad), repeats),
            "grad_input_ms": _median_ms(lambda: k.conv2d_backward_input(g, wt, pad, h, w), repeats),
            "grad_weight_ms": _median_ms(lambda: k.conv2d_backward_weight(g, x, pad, ks), repeats),
        })
    return rows


def bench_network(name, trials, dims):
    backend.use(name)
    params = N.fuse_network(N.init_params(N.NetConfig(16, 4), seed=0))
    return {"backend": name, "dims": list(dims),
            "runtime_ms": M.bench_forward(params, dims, trials=trials, warmup=1).runtime_ms}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--frames", type=int, default=10)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)

    names = backend.available()
    if "compiled" not in names:
        print("compiled kernels are not built; only the numpy backend will be timed")
    previous = backend.name
    try:
        kernels = [row for name in names for row in bench_kernels(name, args.repeats)]
        dims = (1, 3 * args.frames, 180, 320)
        nets = [bench_network(name, max(3, args.repeats // 2 + 1), dims) for name in names]
    finally:
        backend.use(previous)

    print(f"{'layer':<26}{'backend':<10}{'fwd ms':>10}{'dX ms':>10}{'dW ms':>10}")
    for r in kernels:
        print(f"{r['layer']:<26}{r['backend']:<10}{r['forward_ms']:>10.2f}"
              f"{r['grad_input_ms']:>10.2f}{r['grad_weight_ms']:>10.2f}")
    print()
    for r in nets:
        print(f"fused nc=16 nb=4 forward {tuple(r['dims'])} [{r['backend']}]: {r['runtime_ms']:.1f} ms")
    if len(nets) == 2:
        print(f"speedup compiled/numpy: {nets[1]['runtime_ms'] / nets[0]['runtime_ms']:.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": kernels, "network": nets}, fh, indent=2)


if __name__ == "__main__":
    main()

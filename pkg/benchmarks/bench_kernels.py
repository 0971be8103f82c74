"""Time the numba and numpy convolution backends on the model's own shapes.

    python benchmarks/bench_kernels.py [--batch 100] [--repeat 5]

Each row is the best of ``--repeat`` timings after one warm-up call (the
warm-up also absorbs numba's first-call compile). The last block times a
full forward + backward training step of the default network.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from spectra import _kernels as K
from spectra.model import CMTNet, ModelConfig, combined_loss
from spectra.tensor import Tensor, backward, reset_tape


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def conv_cases(batch, bands, s):
    """(label, padded input shape, weight shape) for every conv in one forward pass."""
    d_out = bands - 6
    return [
        ("ssfe conv3d 1->8 k7x3x3", (batch, 1, bands, s + 2, s + 2), (8, 1, 7, 3, 3)),
        (f"ssfe conv2d {8 * d_out}->64 k3x3", (batch, 8 * d_out, s + 2, s + 2), (64, 8 * d_out, 3, 3)),
        ("cnn conv1 64->64 k3x3", (batch, 64, s + 2, s + 2), (64, 64, 3, 3)),
        ("cnn conv2 64->64 k1x1", (batch, 64, s, s), (64, 64, 1, 1)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=100)
    ap.add_argument("--bands", type=int, default=20)
    ap.add_argument("--patch", type=int, default=13)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = ["numba", "numpy"] if K.HAS_NUMBA else ["numpy"]
    rng = np.random.default_rng(0)

    print(f"{'kernel':34s} {'pass':6s}" + "".join(f"{b:>10s}" for b in backends))
    for label, xs, ws in conv_cases(args.batch, args.bands, args.patch):
        xp, w = rng.normal(size=xs), rng.normal(size=ws)
        g = rng.normal(size=K.conv_forward(xp, w).shape)
        passes = {
            "fwd": lambda: K.conv_forward(xp, w),
            "bwd_w": lambda: K.conv_backward_weight(xp, g, ws[2:]),
            "bwd_x": lambda: K.conv_backward_input(g, w),
        }
        for name, fn in passes.items():
            row = []
            for b in backends:
                K.set_backend(b)
                row.append(best_of(fn, args.repeat))
            print(f"{label:34s} {name:6s}" + "".join(f"{t * 1e3:9.1f}ms" for t in row))

    model = CMTNet(ModelConfig(bands=args.bands, classes=4), seed=0)
    x = Tensor(rng.uniform(size=(args.batch, args.bands, args.patch, args.patch)))
    y = np.arange(args.batch) % 4

    def step():
        reset_tape()
        model.zero_grad()
        backward(combined_loss(model(x, "train"), y))

    row = []
    for b in backends:
        K.set_backend(b)
        row.append(best_of(step, max(1, args.repeat // 2)))
    print(f"{'train step (fwd + bwd)':34s} {'':6s}" + "".join(f"{t * 1e3:9.1f}ms" for t in row))


if __name__ == "__main__":
    main()

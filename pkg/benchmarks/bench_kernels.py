"""Compare the compiled convolution kernels against the numpy fallback.

Times each hot kernel on CIFAR-sized shapes with both backends, checks that
they agree, and optionally times one full training step of a shift ResNet
under each backend (selected through CHEAPNET_KERNELS in a subprocess).

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 64] [--end-to-end]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from cheapnet.kernels import using
from cheapnet.layers import ShiftSpec

STEP_SNIPPET = """
import timeit, numpy as np
from cheapnet.graph import preset, substitute_conv
from cheapnet.model import instantiate
from cheapnet.distill import ce_logits
net = instantiate(substitute_conv(preset("resnet20"), "shift"))
rng = np.random.default_rng(0)
x = rng.standard_normal(({batch}, 3, 32, 32)).astype(np.float32)
y = rng.integers(0, 10, {batch})
def step():
    net.zero_grad()
    ce_logits(y, net(x).logits).backward()
step()
print(min(timeit.repeat(step, number=1, repeat={repeat})))
"""


def kernel_cases(batch, channels, size, k, rng):
    pad = k // 2
    xp = rng.standard_normal((batch, channels, size + 2 * pad, size + 2 * pad)).astype(np.float32)
    w = rng.standard_normal((channels, k, k)).astype(np.float32)
    gout = rng.standard_normal((batch, channels, size, size)).astype(np.float32)
    cells = ShiftSpec.round_robin(channels, k).cells
    cols = using("numpy").im2col(xp, k, 1, size, size)
    return {
        "im2col": lambda b: b.im2col(xp, k, 1, size, size),
        "col2im": lambda b: b.col2im(cols, xp.shape, k, 1, size, size),
        "depthwise_forward": lambda b: b.depthwise_forward(xp, w, 1, size, size),
        "depthwise_backward": lambda b: b.depthwise_backward(xp, w, gout, 1),
        "shift_forward": lambda b: b.shift_forward(xp, cells, k, 1, size, size),
        "shift_backward": lambda b: b.shift_backward(gout, cells, k, 1, xp.shape),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(u, v) for u, v in zip(a, b))
    return np.allclose(a, b, rtol=1e-4, atol=1e-4)


def bench_kernels(args):
    rng = np.random.default_rng(0)
    backends = {name: using(name) for name in ("numpy", "cython")}
    print(f"{'kernel':<20} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}  agree")
    for name, fn in kernel_cases(args.batch, args.channels, args.size, args.kernel, rng).items():
        times = {b: min(timeit.repeat(lambda m=mod: fn(m), number=1, repeat=args.repeat)) * 1e3
                 for b, mod in backends.items()}
        agree = _same(fn(backends["numpy"]), fn(backends["cython"]))
        print(f"{name:<20} {times['numpy']:>10.3f} {times['cython']:>10.3f} "
              f"{times['numpy'] / times['cython']:>7.2f}x  {agree}")


def bench_step(args):
    code = STEP_SNIPPET.format(batch=args.batch, repeat=max(3, args.repeat // 4))
    results = {}
    for backend in ("numpy", "cython"):
        env = dict(os.environ, CHEAPNET_KERNELS=backend)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        results[backend] = float(out.stdout.strip()) * 1e3
    print(f"\nresnet20-shift train step, batch {args.batch}: numpy {results['numpy']:.1f} ms, "
          f"cython {results['cython']:.1f} ms ({results['numpy'] / results['cython']:.2f}x)")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--end-to-end", action="store_true", help="also time a full training step per backend")
    args = p.parse_args(argv)
    bench_kernels(args)
    if args.end_to_end:
        bench_step(args)


if __name__ == "__main__":
    main()

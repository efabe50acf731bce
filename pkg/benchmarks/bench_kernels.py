"""Compiled vs numpy kernels: per-kernel timings and one conv2d forward/backward.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 32]
"""
import argparse
import time

import numpy as np

from steercnn import kernels, tensor


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(impl, rng, batch):
    xp = rng.normal(size=(batch, 8, 22, 22))
    cols = np.empty((8 * 49, batch * 16 * 16))
    acc = np.zeros_like(xp)
    x = rng.normal(size=(batch, 32, 16, 16))
    out = np.empty((batch, 32, 8, 8))
    arg = np.empty(out.shape, dtype=np.int8)
    dx = np.zeros_like(x)
    impl.max_pool2_forward(x, out, arg)
    return {
        "im2col 7x7": lambda: impl.im2col(xp, 7, 7, cols),
        "col2im 7x7": lambda: impl.col2im(cols, 7, 7, acc),
        "max_pool2 fwd": lambda: impl.max_pool2_forward(x, out, arg),
        "max_pool2 bwd": lambda: impl.max_pool2_backward(out, arg, dx),
    }


def conv_case(rng, batch):
    x = rng.normal(size=(batch, 32, 16, 16))
    w = rng.normal(size=(32, 32, 7, 7))

    def run():
        y = tensor.conv2d(x, w)
        tensor.conv2d_backward(y, x, w)
    return run


def use(impl):
    for name in ("im2col", "col2im", "max_pool2_forward", "max_pool2_backward"):
        setattr(kernels, name, getattr(impl, name))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--batch", type=int, default=32)
    args = p.parse_args(argv)
    impls = kernels.implementations()
    if "cython" not in impls:
        print("compiled kernels not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    rows = {}
    for name, impl in impls.items():
        for case, fn in kernel_cases(impl, rng, args.batch).items():
            rows.setdefault(case, {})[name] = best_of(fn, args.repeat)
        use(impl)
        rows.setdefault("conv2d fwd+bwd 32->32", {})[name] = best_of(conv_case(rng, args.batch), max(3, args.repeat // 5))
    use(impls[kernels.BACKEND])
    names = list(impls)
    print(f"{'case':24s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for case, t in rows.items():
        line = f"{case:24s}" + "".join(f"{1e3 * t[n]:10.3f}ms" for n in names)
        if len(names) > 1:
            line += f"{t['python'] / t['cython']:11.2f}x"
        print(line)


if __name__ == "__main__":
    main()

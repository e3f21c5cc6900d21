"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]

Prints per-call time for each kernel and backend, the speedup, and whether the
two backends agree bit for bit.
"""

import argparse
import timeit

import numpy as np

from rllogo import _pykernels, kernels

try:
    from rllogo import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    img = rng.integers(0, 256, (64, 64, 3)).astype(np.uint8)
    box = (0.13, 0.21, 0.77, 0.64)
    shape = (1024, 1024)
    p = rng.standard_normal(shape).astype(np.float32)
    v = rng.standard_normal(shape).astype(np.float32)
    g = rng.standard_normal(shape).astype(np.float32)
    a = rng.uniform(0, 1, (4096, 4))
    a[:, 2:] += a[:, :2]
    b = rng.uniform(0, 1, (4096, 4))
    b[:, 2:] += b[:, :2]

    def crop(impl):
        return lambda: kernels.crop_resize_raw(img, box, 32, impl=impl)

    def sgd(impl):
        def run():
            pp, vv = p.copy(), v.copy()
            kernels.sgd_momentum_update(pp, vv, g, 1e-3, 0.9, 1e-4, impl=impl)
            return pp
        return run

    def iou(impl):
        return lambda: kernels.iou_pairs(a, b, impl=impl)

    return {"crop_resize 64->32": crop, "sgd_momentum 1M params": sgd, "iou_pairs 4096": iou}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy backend is available")
    impls = {"numpy": _pykernels}
    if _ckernels is not None:
        impls["cython"] = _ckernels
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}" + "".join(f"{k:>14}" for k in impls) + f"{'speedup':>10}{'identical':>11}")
    for name, make in cases(rng).items():
        times, outs = {}, {}
        for label, impl in impls.items():
            fn = make(impl)
            outs[label] = fn()
            n, _ = timeit.Timer(fn).autorange()
            times[label] = min(timeit.repeat(fn, number=n, repeat=args.repeat)) / n
        row = f"{name:<24}" + "".join(f"{times[k] * 1e6:>11.1f} us" for k in impls)
        if "cython" in impls:
            same = np.array_equal(outs["numpy"], outs["cython"])
            row += f"{times['numpy'] / times['cython']:>9.1f}x{str(same):>11}"
        print(row)


if __name__ == "__main__":
    main()

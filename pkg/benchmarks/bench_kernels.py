"""Compare the numba and numpy convolution backends on training-shaped inputs.

Run from the repository root:

    python3 benchmarks/bench_kernels.py [--repeats 5] [--batch 32]

Reports per-case median wall time for both backends plus the max elementwise
disagreement (the backends share signatures; results differ only by float
rounding). The active default backend is whatever PINAS_KERNEL_BACKEND picked
at import, shown in the header.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from pinas.kernels import BACKEND, get_backend

CASES = (
    # (label, cin, cout, hw, stride, groups)
    ("stem 2->16, 16px", 2, 16, 16, 1, 1),
    ("body 16->16, 16px", 16, 16, 16, 1, 1),
    ("body 16->16, g=4", 16, 16, 16, 1, 4),
    ("reduce 16->32, s=2", 16, 32, 16, 2, 1),
    ("deep 32->32, 8px", 32, 32, 8, 1, 1),
)


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench(batch: int, repeats: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    try:
        nb = get_backend("numba")
    except ImportError:
        nb = None
    np_impl = get_backend("numpy")
    rows = []
    for label, cin, cout, hw, stride, groups in CASES:
        x = rng.standard_normal((batch, cin, hw, hw)).astype(np.float32)
        w = rng.standard_normal((cout, cin // groups, 3, 3)).astype(np.float32) * 0.1
        out = np_impl.conv2d_forward(x, w, stride, 1, groups)
        dout = rng.standard_normal(out.shape).astype(np.float32)

        row = {"case": label, "shape": f"{tuple(x.shape)}"}
        impls = {"numpy": np_impl} | ({"numba": nb} if nb else {})
        results = {}
        for name, impl in impls.items():
            # warm call first so numba's compile time stays out of the numbers
            y = impl.conv2d_forward(x, w, stride, 1, groups)
            impl.conv2d_backward(x, w, dout, stride, 1, groups)
            results[name] = y
            row[f"{name}_fwd_ms"] = 1e3 * _median_time(
                lambda impl=impl: impl.conv2d_forward(x, w, stride, 1, groups), repeats
            )
            row[f"{name}_bwd_ms"] = 1e3 * _median_time(
                lambda impl=impl: impl.conv2d_backward(x, w, dout, stride, 1, groups),
                repeats,
            )
        if nb:
            row["max_abs_diff"] = float(
                np.max(np.abs(results["numba"] - results["numpy"]))
            )
        rows.append(row)
    return rows


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rows = bench(args.batch, args.repeats, args.seed)
    has_nb = "numba_fwd_ms" in rows[0]
    print(f"# active default backend: {BACKEND}")
    header = f"{'case':<22} {'numpy fwd':>10} {'numpy bwd':>10}"
    if has_nb:
        header += f" {'numba fwd':>10} {'numba bwd':>10} {'speedup':>8} {'max|d|':>9}"
    print(header)
    for r in rows:
        line = f"{r['case']:<22} {r['numpy_fwd_ms']:>8.2f}ms {r['numpy_bwd_ms']:>8.2f}ms"
        if has_nb:
            speed = (r["numpy_fwd_ms"] + r["numpy_bwd_ms"]) / (
                r["numba_fwd_ms"] + r["numba_bwd_ms"]
            )
            line += (
                f" {r['numba_fwd_ms']:>8.2f}ms {r['numba_bwd_ms']:>8.2f}ms"
                f" {speed:>7.2f}x {r['max_abs_diff']:>9.2e}"
            )
        print(line)
    if not has_nb:
        print("# numba unavailable; only the numpy backend was timed")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

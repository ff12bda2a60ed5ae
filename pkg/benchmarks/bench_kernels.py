"""Compare the compiled kernels with the numpy fallback on rig-sized inputs.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--threads N]

Prints the median wall time per kernel for each backend, the speed-up, and
the largest absolute difference between the two outputs.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from surrounddepth import _kernels_py, synth
from surrounddepth.geometry import relative_pose

try:
    from surrounddepth import _kernels as _compiled
except ImportError:
    _compiled = None


def _timed(fn, repeat: int):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def _max_diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def build_cases(threads: int):
    rig = synth.build_rig()
    frames = synth.render(synth.default_scene(0), rig)
    (img0, d0), (img1, _) = frames[0], frames[1]
    cam0, cam1 = rig.cameras[0], rig.cameras[1]
    rel = relative_pose(rig, 0, 1)
    rng = np.random.default_rng(0)
    u = rng.uniform(0, cam1.width - 1, 200_000)
    v = rng.uniform(0, cam1.height - 1, 200_000)
    gray0, gray1 = img0.gray(), img1.gray()
    qi = np.column_stack([rng.integers(20, cam0.width - 20, 500), rng.integers(20, cam0.height - 20, 500)])
    qj = qi + rng.integers(-2, 3, qi.shape)
    warp_args = (img1.data, d0.data, d0.valid, cam0.K_inv, rel.rotation, rel.translation, cam1.K)
    return {
        "bilinear_sample": lambda k: k.bilinear_sample(img1.data, u, v, threads),
        "warp_sample": lambda k: k.warp_sample(*warp_args, threads),
        "box_mean": lambda k: k.box_mean(gray0, 2, threads),
        "ncc_refine": lambda k: k.ncc_refine(gray0, gray1, qi, qj, 5, 2, threads),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--threads", type=int, default=0, help="0 = all cores")
    args = parser.parse_args(argv)

    if _compiled is None:
        print("compiled extension not built; install with `pip install -e . --no-build-isolation`")
        return 1
    cases = build_cases(args.threads)
    print(f"{'kernel':<16}{'python ms':>12}{'cython ms':>12}{'speed-up':>10}{'max diff':>12}")
    for name, fn in cases.items():
        t_py, out_py = _timed(lambda: fn(_kernels_py), args.repeat)
        t_cy, out_cy = _timed(lambda: fn(_compiled), args.repeat)
        print(f"{name:<16}{1e3 * t_py:>12.2f}{1e3 * t_cy:>12.2f}{t_py / t_cy:>9.1f}x{_max_diff(out_py, out_cy):>12.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--rays 65536] [--samples 64] [--size 128] [--repeat 5]

Both paths are called directly from ``sdsinpaint._kernels``, so the
``SDSINPAINT_NUMBA`` setting does not matter here.  The first numba call is
excluded from timing (JIT compilation).  Outputs of the two paths are
compared and the largest absolute difference is reported.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from sdsinpaint import _kernels as K
from sdsinpaint.geometry import backproject_depth
from sdsinpaint.render import Camera


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - start)
    return min(times), out


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)), initial=0.0))


def composite_inputs(rng, rays, samples):
    sigma = rng.exponential(2.0, (rays, samples))
    rgb = rng.random((rays, samples, 3))
    near = np.full(rays, 0.5)
    far = np.full(rays, 4.0)
    t = np.sort(rng.uniform(0.5, 4.0, (rays, samples)), axis=1)
    return sigma, rgb, t, near, far, np.zeros(3)


def plane_inputs(rng, size):
    cam = Camera(1.2 * size, 1.2 * size, size / 2, size / 2, size, size, np.eye(4), 0.1, 10.0)
    v, u = np.mgrid[0:size, 0:size]
    depth = 2.0 + 0.3 * np.sin(u / 9.0) + 0.2 * np.cos(v / 7.0) + 0.002 * rng.standard_normal((size, size))
    pts = backproject_depth(depth, cam)
    return pts, np.ones((size, size), bool)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rays", type=int, default=65536)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--size", type=int, default=128, help="depth image side for plane fitting")
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)

    comp = composite_inputs(rng, args.rays, args.samples)
    pts, valid = plane_inputs(rng, args.size)
    g_color = rng.standard_normal((args.rays, 3))
    g_depth = rng.standard_normal(args.rays)
    g_opacity = rng.standard_normal(args.rays)

    fwd = {"numba": K.composite_forward_numba, "numpy": K.composite_forward_numpy}
    bwd = {"numba": K.composite_backward_numba, "numpy": K.composite_backward_numpy}
    pfit = {"numba": K.plane_fit_forward_numba, "numpy": K.plane_fit_forward_numpy}
    pback = {"numba": K.plane_fit_backward_numba, "numpy": K.plane_fit_backward_numpy}

    fwd_out = K.composite_forward_numpy(*comp)
    w, trans = fwd_out[3], fwd_out[4]
    fit_out = K.plane_fit_forward_numpy(pts, valid, 9, 2)
    _, mode, nbr, n_raw, sign = fit_out
    g_normals = rng.standard_normal(pts.shape)

    cases = [
        (f"composite forward   {args.rays} x {args.samples}", fwd, lambda f: f(*comp)),
        (f"composite backward  {args.rays} x {args.samples}", bwd,
         lambda f: f(*comp, w, trans, g_color, g_depth, g_opacity)),
        (f"plane fit forward   {args.size} x {args.size}", pfit, lambda f: f(pts, valid, 9, 2)),
        (f"plane fit backward  {args.size} x {args.size}", pback, lambda f: f(pts, mode, nbr, n_raw, sign, g_normals)),
    ]
    print(f"{'kernel':<36} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'max diff':>10}")
    for name, impls, call in cases:
        call(impls["numba"])  # compile
        t_nb, out_nb = best_of(lambda: call(impls["numba"]), args.repeat)
        t_np, out_np = best_of(lambda: call(impls["numpy"]), args.repeat)
        print(f"{name:<36} {1e3 * t_nb:>10.2f} {1e3 * t_np:>10.2f} {t_np / t_nb:>7.1f}x {max_diff(out_nb, out_np):>10.1e}")


if __name__ == "__main__":
    main()

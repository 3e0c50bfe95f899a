"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeats 3] [--resolution 96]

Both paths are called directly, so the ``FEWSHOT_SDF_DISABLE_NUMBA`` flag is
not needed; outputs are checked for equality before timing.
"""

import argparse
import time

import numpy as np

from fewshot_sdf import _accel, kernels
from fewshot_sdf.mc_tables import CORNERS, EDGE_AXIS, EDGE_ORIGIN, TRI_COUNT, TRI_TABLE
from fewshot_sdf.reconstruct import evaluate_grid, marching_cubes


def best_of(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--resolution", type=int, default=96, help="marching-cubes grid resolution")
    ap.add_argument("--points", type=int, default=20_000, help="query points for the inside test")
    ap.add_argument("--nn", type=int, default=4_000, help="set size for brute-force nearest neighbors")
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not available (or disabled); nothing to compare")

    sphere = lambda p: np.linalg.norm(p, axis=1) - 0.6
    values = evaluate_grid(sphere, args.resolution).values
    mc_np = lambda: kernels._mc_edges_numpy(values, 0.0)
    mc_nb = lambda: kernels._mc_edges_numba(values, 0.0, TRI_TABLE, TRI_COUNT, CORNERS, EDGE_ORIGIN, EDGE_AXIS)

    tris = marching_cubes(evaluate_grid(sphere, 64)).corners()
    pts = np.random.default_rng(0).uniform(-1, 1, size=(args.points, 3))
    pargs = kernels.parity_args(pts, tris, kernels.RAY_TILT_PRIMARY)
    par_np = lambda: kernels._parity_numpy(*pargs)
    par_nb = lambda: kernels._parity_numba(*pargs)

    rng = np.random.default_rng(1)
    q, ref = rng.uniform(-1, 1, size=(args.nn, 3)), rng.uniform(-1, 1, size=(args.nn, 3))
    nn_np = lambda: kernels._nn_numpy(q, ref)
    nn_nb = lambda: kernels._nn_numba(q, ref)

    rows = [("marching cubes R=%d" % args.resolution, mc_np, mc_nb),
            ("ray parity %d pts, %d tris" % (args.points, len(tris)), par_np, par_nb),
            ("brute nearest %d x %d" % (args.nn, args.nn), nn_np, nn_nb)]
    print(f"{'kernel':<40s} {'numpy s':>9s} {'numba s':>9s} {'speedup':>8s}")
    for name, f_np, f_nb in rows:
        a, b = f_np(), f_nb()  # also compiles the numba version
        same = all(np.array_equal(x, y) for x, y in zip(a if isinstance(a, tuple) else (a,),
                                                        b if isinstance(b, tuple) else (b,)))
        if not same:
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_np, t_nb = best_of(f_np, args.repeats), best_of(f_nb, args.repeats)
        print(f"{name:<40s} {t_np:9.4f} {t_nb:9.4f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()

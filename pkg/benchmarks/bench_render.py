"""Forward + backward rasterisation timings for the numba and numpy kernels.

    python3 benchmarks/bench_render.py [--sizes 100 400 1600] [--resolution 96] [--repeats 5]

Both backends run the same scenes in one process (the backend is chosen per
call through ``RenderOptions.backend``), and their outputs are compared so a
speed-up never hides a divergence.
"""
import argparse
import time

import numpy as np

from splatloop import _accel
from splatloop.render import RenderOptions, render, render_backward
from splatloop.scene import GaussianSet
from splatloop.synthetic import SyntheticSceneSpec, camera_ring


def random_scene(n, rng):
    means = rng.normal(0, 0.5, (n, 3))
    quats = np.column_stack([np.ones(n), rng.normal(0, 0.3, (n, 3))])
    return GaussianSet.from_activated(means, quats, rng.uniform(0.03, 0.1, (n, 3)), rng.uniform(0.3, 0.9, n),
                                      rng.uniform(0, 1, (n, 3)), np.arange(n))


def time_backend(gs, view, backend, repeats):
    opts = RenderOptions(backend=backend)
    frame = render(gs, view, opts)
    grads = render_backward(frame, np.ones_like(frame.color))  # warm-up (includes JIT on first call)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        frame = render(gs, view, opts)
        grads = render_backward(frame, np.ones_like(frame.color))
        best = min(best, time.perf_counter() - t0)
    return best, frame.color, grads


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[100, 400, 1600])
    ap.add_argument("--resolution", type=int, default=96)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)

    backends = ["numpy"] + (["numba"] if _accel.NUMBA_AVAILABLE else [])
    view = camera_ring(SyntheticSceneSpec(resolution=args.resolution))[0]
    rng = np.random.default_rng(0)
    print(f"{'splats':>7} " + " ".join(f"{b + ' ms':>10}" for b in backends) + f" {'speedup':>8} {'max |diff|':>11}")
    for n in args.sizes:
        gs = random_scene(n, rng)
        res = {b: time_backend(gs, view, b, args.repeats) for b in backends}
        row = f"{n:>7d} " + " ".join(f"{1e3 * res[b][0]:>10.2f}" for b in backends)
        if "numba" in res:
            diff = max(np.abs(res["numba"][1] - res["numpy"][1]).max(),
                       max(np.abs(res["numba"][2][k] - res["numpy"][2][k]).max() for k in res["numpy"][2]))
            row += f" {res['numpy'][0] / res['numba'][0]:>8.1f} {diff:>11.2e}"
        print(row)


if __name__ == "__main__":
    main()

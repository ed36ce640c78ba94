"""Compare the numba and pure-numpy compositing backends.

Renders a 20k-Gaussian cloud at 256x256 through both kernel backends
(forward and backward), reports wall-clock times and the maximum output
deviation, and measures the tile-parallel speedup at several worker
counts. The backend can also be forced globally via MMGS_BACKEND.

Run:

    python benchmarks/benchmark_backends.py [--count 20000] [--res 256]
"""

import argparse
import os
import time

import numpy as np

from mmgs import kernels
from mmgs.diffgrad import Tensor
from mmgs.gaussians import Camera, GaussianSet
from mmgs.rasterizer import rasterize


def make_scene(count, rng):
    centers = np.column_stack(
        [rng.uniform(-1.2, 1.2, count), rng.uniform(-1.2, 1.2, count),
         rng.uniform(1.5, 5.0, count)]
    )
    sh = np.zeros((count, 4, 3), dtype=np.float32)
    sh[:, 0, :] = rng.normal(0, 0.3, (count, 3))
    return GaussianSet(
        centers=centers.astype(np.float32),
        sh_coeffs=sh,
        opacity_logit=rng.uniform(-1.5, 1.5, count).astype(np.float32),
        rotation=rng.normal(size=(count, 4)).astype(np.float32),
        log_scale=np.log(rng.uniform(0.004, 0.02, (count, 3))).astype(np.float32),
    )


def camera(res):
    K = np.array([[res, 0, res / 2.0], [0, res, res / 2.0], [0, 0, 1.0]])
    W = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
    return Camera(0, K, W, res, res)


def time_render(gs, cam, repeats, with_backward=False):
    best = float("inf")
    image = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = rasterize(gs, cam)
        if with_backward:
            out.pixels.mean().backward()
        best = min(best, time.perf_counter() - t0)
        image = out.array()
    return best, image


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--count", type=int, default=20000)
    parser.add_argument("--res", type=int, default=256)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    rng = np.random.default_rng(17)
    gs = make_scene(args.count, rng)
    cam = camera(args.res)
    grad_gs = GaussianSet(
        centers=Tensor(gs.centers.data.copy(), requires_grad=True),
        sh_coeffs=gs.sh_coeffs,
        opacity_logit=gs.opacity_logit,
        rotation=gs.rotation,
        log_scale=gs.log_scale,
    )

    print(f"{args.count} Gaussians at {args.res}x{args.res}, "
          f"{os.cpu_count()} cores")
    results = {}
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    for backend in backends:
        kernels.set_backend(backend)
        kernels.set_tile_workers(1)
        time_render(gs, cam, 1)  # warmup (JIT compile on the numba path)
        fwd, image = time_render(gs, cam, args.repeats)
        bwd, _ = time_render(grad_gs, cam, args.repeats, with_backward=True)
        results[backend] = (fwd, bwd, image)
        print(f"  {backend:6s} forward {fwd * 1000:8.1f} ms   "
              f"forward+backward {bwd * 1000:8.1f} ms")

    if len(results) == 2:
        dev = float(
            np.abs(
                results["numba"][2].astype(np.float64)
                - results["numpy"][2].astype(np.float64)
            ).max()
        )
        speedup = results["numpy"][0] / results["numba"][0]
        print(f"  max |numba - numpy| = {dev:.2e}")
        print(f"  numba speedup over numpy: {speedup:.2f}x (forward)")

    if kernels.HAVE_NUMBA:
        kernels.set_backend("numba")
        base = None
        for workers in (1, 2, 4):
            kernels.set_tile_workers(workers)
            time_render(gs, cam, 1)  # warm this compilation path
            t, img = time_render(gs, cam, args.repeats)
            base = base or t
            print(f"  numba {workers} worker(s): {t * 1000:8.1f} ms "
                  f"({base / t:.2f}x vs 1 worker)")
        kernels.set_tile_workers(1)


if __name__ == "__main__":
    main()

"""Tile compositing kernels: the hot inner loops of the rasterizer.

Two interchangeable backends implement identical semantics:

* ``numba`` — @njit kernels, parallelized over tiles with prange
  (worker count via set_tile_workers).
* ``numpy`` — vectorized fallback, one (pixels x entries) block per tile.

Selection: MMGS_BACKEND=numpy|numba in the environment, or set_backend().
Default is numba when importable. Both backends accumulate in float64
regardless of input dtype, so their outputs agree to rounding and results
are reproducible across thread counts (per-entry gradient slots are
reduced in a fixed order).

Per-pixel semantics (front-to-back over the tile's depth-sorted entries):
sigma = min(alpha * exp(-0.5 d^T Q d), sigma_clamp); the contribution is
accumulated first and compositing stops once transmittance drops below
stop_T (pass stop_T <= 0 to disable early termination).
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except Exception:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

_backend = None
_workers = 1


def _env_backend():
    choice = os.environ.get("MMGS_BACKEND", "").strip().lower()
    if choice in ("numpy", "numba"):
        return choice
    return "numba" if HAVE_NUMBA else "numpy"


def active_backend():
    global _backend
    if _backend is None:
        set_backend(_env_backend())
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numpy", "numba"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _backend = name


def set_tile_workers(n):
    """Number of threads used for tile-parallel kernels (numba only)."""
    global _workers
    _workers = max(1, int(n))
    if HAVE_NUMBA:
        numba.set_num_threads(min(_workers, numba.config.NUMBA_NUM_THREADS))


def tile_workers():
    return _workers


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def composite_forward(means2d, conic, colors, alphas, point_list, tile_offsets,
                      tiles_x, tile_size, width, height, background,
                      stop_t, sigma_clamp):
    args = (
        _f64(means2d), _f64(conic), _f64(colors), _f64(alphas),
        np.ascontiguousarray(point_list, dtype=np.int64),
        np.ascontiguousarray(tile_offsets, dtype=np.int64),
        int(tiles_x), int(tile_size), int(width), int(height),
        _f64(background), float(stop_t), float(sigma_clamp),
    )
    if active_backend() == "numba":
        if _workers > 1:
            numba.set_num_threads(min(_workers, numba.config.NUMBA_NUM_THREADS))
            return _forward_nb_par(*args)
        return _forward_nb_ser(*args)
    return _forward_np(*args)


def composite_backward(means2d, conic, colors, alphas, point_list, tile_offsets,
                       tiles_x, tile_size, width, height, background,
                       stop_t, sigma_clamp, grad_image, final_t, n_contrib):
    args = (
        _f64(means2d), _f64(conic), _f64(colors), _f64(alphas),
        np.ascontiguousarray(point_list, dtype=np.int64),
        np.ascontiguousarray(tile_offsets, dtype=np.int64),
        int(tiles_x), int(tile_size), int(width), int(height),
        _f64(background), float(stop_t), float(sigma_clamp),
        _f64(grad_image), _f64(final_t),
        np.ascontiguousarray(n_contrib, dtype=np.int32),
    )
    if active_backend() == "numba":
        if _workers > 1:
            numba.set_num_threads(min(_workers, numba.config.NUMBA_NUM_THREADS))
            slots = _backward_nb_par(*args)
        else:
            slots = _backward_nb_ser(*args)
    else:
        slots = _backward_np(*args)
    # deterministic entry->gaussian reduction, independent of tile scheduling
    g_count = means2d.shape[0]
    grad_means = np.zeros((g_count, 2))
    grad_conic = np.zeros((g_count, 3))
    grad_colors = np.zeros((g_count, 3))
    grad_alphas = np.zeros(g_count)
    pl = np.asarray(point_list, dtype=np.int64)
    np.add.at(grad_means, pl, slots[:, 0:2])
    np.add.at(grad_conic, pl, slots[:, 2:5])
    np.add.at(grad_colors, pl, slots[:, 5:8])
    np.add.at(grad_alphas, pl, slots[:, 8])
    return grad_means, grad_conic, grad_colors, grad_alphas


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------


def _tile_bounds(tid, tiles_x, tile_size, width, height):
    ty, tx = divmod(tid, tiles_x)
    x0, y0 = tx * tile_size, ty * tile_size
    return x0, y0, min(x0 + tile_size, width), min(y0 + tile_size, height)


def _tile_sigma(means2d, conic, alphas, ids, x0, y0, x1, y1, sigma_clamp):
    xs = np.arange(x0, x1, dtype=np.float64)
    ys = np.arange(y0, y1, dtype=np.float64)
    px = np.tile(xs, y1 - y0)[:, None]
    py = np.repeat(ys, x1 - x0)[:, None]
    dx = px - means2d[ids, 0][None, :]
    dy = py - means2d[ids, 1][None, :]
    qa = conic[ids, 0][None, :]
    qb = conic[ids, 1][None, :]
    qc = conic[ids, 2][None, :]
    power = -0.5 * (qa * dx * dx + qc * dy * dy) - qb * dx * dy
    raw = alphas[ids][None, :] * np.exp(power)
    return dx, dy, qa, qb, qc, power, raw, np.minimum(raw, sigma_clamp)


def _forward_np(means2d, conic, colors, alphas, point_list, tile_offsets,
                tiles_x, tile_size, width, height, background,
                stop_t, sigma_clamp):
    image = np.empty((height, width, 3))
    image[:] = background[None, None, :]
    final_t = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int32)
    for tid in range(tile_offsets.shape[0] - 1):
        x0, y0, x1, y1 = _tile_bounds(tid, tiles_x, tile_size, width, height)
        if x1 <= x0 or y1 <= y0:
            continue
        s, e = tile_offsets[tid], tile_offsets[tid + 1]
        if s == e:
            continue
        ids = point_list[s:e]
        _, _, _, _, _, _, _, sigma = _tile_sigma(
            means2d, conic, alphas, ids, x0, y0, x1, y1, sigma_clamp
        )
        t_after = np.cumprod(1.0 - sigma, axis=1)
        t_before = np.empty_like(t_after)
        t_before[:, 0] = 1.0
        t_before[:, 1:] = t_after[:, :-1]
        if stop_t > 0:
            mask = t_before >= stop_t
        else:
            mask = np.ones_like(t_before, dtype=bool)
        weights = sigma * t_before * mask
        counts = mask.sum(axis=1).astype(np.int32)
        rows = np.arange(weights.shape[0])
        t_final = np.where(counts > 0, t_after[rows, np.maximum(counts - 1, 0)], 1.0)
        block = weights @ colors[ids] + t_final[:, None] * background[None, :]
        h, w = y1 - y0, x1 - x0
        image[y0:y1, x0:x1] = block.reshape(h, w, 3)
        final_t[y0:y1, x0:x1] = t_final.reshape(h, w)
        n_contrib[y0:y1, x0:x1] = counts.reshape(h, w)
    return image, final_t, n_contrib


def _backward_np(means2d, conic, colors, alphas, point_list, tile_offsets,
                 tiles_x, tile_size, width, height, background,
                 stop_t, sigma_clamp, grad_image, final_t, n_contrib):
    slots = np.zeros((point_list.shape[0], 9))
    for tid in range(tile_offsets.shape[0] - 1):
        x0, y0, x1, y1 = _tile_bounds(tid, tiles_x, tile_size, width, height)
        if x1 <= x0 or y1 <= y0:
            continue
        s, e = tile_offsets[tid], tile_offsets[tid + 1]
        if s == e:
            continue
        ids = point_list[s:e]
        dx, dy, qa, qb, qc, power, raw, sigma = _tile_sigma(
            means2d, conic, alphas, ids, x0, y0, x1, y1, sigma_clamp
        )
        om = 1.0 - sigma
        t_after = np.cumprod(om, axis=1)
        t_before = np.empty_like(t_after)
        t_before[:, 0] = 1.0
        t_before[:, 1:] = t_after[:, :-1]
        if stop_t > 0:
            mask = t_before >= stop_t
        else:
            mask = np.ones_like(t_before, dtype=bool)
        weights = sigma * t_before * mask
        tile_cols = colors[ids]
        tf = final_t[y0:y1, x0:x1].reshape(-1)
        g = grad_image[y0:y1, x0:x1].reshape(-1, 3)
        contrib = weights[:, :, None] * tile_cols[None, :, :]
        suffix_incl = np.cumsum(contrib[:, ::-1, :], axis=1)[:, ::-1, :]
        behind = (
            suffix_incl - contrib + (tf[:, None] * background[None, :])[:, None, :]
        )
        dsig_vec = t_before[:, :, None] * tile_cols[None, :, :] - behind / om[:, :, None]
        dsigma = (g[:, None, :] * dsig_vec).sum(axis=2) * mask
        unclamped = raw < sigma_clamp
        dpower = dsigma * sigma * unclamped
        dcolors = np.einsum("pk,pc->kc", weights, g)
        dalpha = (dsigma * np.exp(power) * unclamped).sum(axis=0)
        slots[s:e, 0] += (dpower * (qa * dx + qb * dy)).sum(axis=0)
        slots[s:e, 1] += (dpower * (qb * dx + qc * dy)).sum(axis=0)
        slots[s:e, 2] += (dpower * (-0.5 * dx * dx)).sum(axis=0)
        slots[s:e, 3] += (dpower * (-dx * dy)).sum(axis=0)
        slots[s:e, 4] += (dpower * (-0.5 * dy * dy)).sum(axis=0)
        slots[s:e, 5:8] += dcolors
        slots[s:e, 8] += dalpha
    return slots


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    def _forward_impl(means2d, conic, colors, alphas, point_list, tile_offsets,
                      tiles_x, tile_size, width, height, background,
                      stop_t, sigma_clamp):
        image = np.empty((height, width, 3))
        final_t = np.ones((height, width))
        n_contrib = np.zeros((height, width), dtype=np.int32)
        n_tiles = tile_offsets.shape[0] - 1
        for tid in prange(n_tiles):
            tx = tid % tiles_x
            ty = tid // tiles_x
            x0 = tx * tile_size
            y0 = ty * tile_size
            x1 = min(x0 + tile_size, width)
            y1 = min(y0 + tile_size, height)
            s = tile_offsets[tid]
            e = tile_offsets[tid + 1]
            for yy in range(y0, y1):
                for xx in range(x0, x1):
                    trans = 1.0
                    cr = 0.0
                    cg = 0.0
                    cb = 0.0
                    count = 0
                    for k in range(s, e):
                        gid = point_list[k]
                        dx = xx - means2d[gid, 0]
                        dy = yy - means2d[gid, 1]
                        power = (
                            -0.5 * (conic[gid, 0] * dx * dx + conic[gid, 2] * dy * dy)
                            - conic[gid, 1] * dx * dy
                        )
                        sigma = alphas[gid] * np.exp(power)
                        if sigma > sigma_clamp:
                            sigma = sigma_clamp
                        w = sigma * trans
                        cr += w * colors[gid, 0]
                        cg += w * colors[gid, 1]
                        cb += w * colors[gid, 2]
                        trans *= 1.0 - sigma
                        count += 1
                        if stop_t > 0.0 and trans < stop_t:
                            break
                    image[yy, xx, 0] = cr + trans * background[0]
                    image[yy, xx, 1] = cg + trans * background[1]
                    image[yy, xx, 2] = cb + trans * background[2]
                    final_t[yy, xx] = trans
                    n_contrib[yy, xx] = count
        return image, final_t, n_contrib

    def _backward_impl(means2d, conic, colors, alphas, point_list, tile_offsets,
                       tiles_x, tile_size, width, height, background,
                       stop_t, sigma_clamp, grad_image, final_t, n_contrib):
        slots = np.zeros((point_list.shape[0], 9))
        n_tiles = tile_offsets.shape[0] - 1
        for tid in prange(n_tiles):
            tx = tid % tiles_x
            ty = tid // tiles_x
            x0 = tx * tile_size
            y0 = ty * tile_size
            x1 = min(x0 + tile_size, width)
            y1 = min(y0 + tile_size, height)
            s = tile_offsets[tid]
            for yy in range(y0, y1):
                for xx in range(x0, x1):
                    count = n_contrib[yy, xx]
                    if count == 0:
                        continue
                    gr = grad_image[yy, xx, 0]
                    gg = grad_image[yy, xx, 1]
                    gb = grad_image[yy, xx, 2]
                    t_behind = final_t[yy, xx]
                    br = t_behind * background[0]
                    bg_ = t_behind * background[1]
                    bb = t_behind * background[2]
                    for k in range(s + count - 1, s - 1, -1):
                        gid = point_list[k]
                        dx = xx - means2d[gid, 0]
                        dy = yy - means2d[gid, 1]
                        qa = conic[gid, 0]
                        qb = conic[gid, 1]
                        qc = conic[gid, 2]
                        power = -0.5 * (qa * dx * dx + qc * dy * dy) - qb * dx * dy
                        raw = alphas[gid] * np.exp(power)
                        sigma = raw if raw < sigma_clamp else sigma_clamp
                        om = 1.0 - sigma
                        t_k = t_behind / om
                        w = sigma * t_k
                        c0 = colors[gid, 0]
                        c1 = colors[gid, 1]
                        c2 = colors[gid, 2]
                        dsigma = (
                            gr * (t_k * c0 - br / om)
                            + gg * (t_k * c1 - bg_ / om)
                            + gb * (t_k * c2 - bb / om)
                        )
                        slots[k, 5] += gr * w
                        slots[k, 6] += gg * w
                        slots[k, 7] += gb * w
                        if raw < sigma_clamp:
                            slots[k, 8] += dsigma * np.exp(power)
                            dpower = dsigma * sigma
                            slots[k, 0] += dpower * (qa * dx + qb * dy)
                            slots[k, 1] += dpower * (qb * dx + qc * dy)
                            slots[k, 2] += dpower * (-0.5 * dx * dx)
                            slots[k, 3] += dpower * (-dx * dy)
                            slots[k, 4] += dpower * (-0.5 * dy * dy)
                        t_behind = t_k
                        br += w * c0
                        bg_ += w * c1
                        bb += w * c2
        return slots

    # prange degrades to range without parallel=True, so one implementation
    # serves both compilations. The parallel variants must not share the
    # serial on-disk cache (same code object -> same cache entry, which
    # would silently load the serial binary), so only the serial default
    # path is cached.
    _forward_nb_par = njit(parallel=True, cache=False)(_forward_impl)
    _forward_nb_ser = njit(cache=True)(_forward_impl)
    _backward_nb_par = njit(parallel=True, cache=False)(_backward_impl)
    _backward_nb_ser = njit(cache=True)(_backward_impl)

"""Differentiable image formation: tile-based front-to-back alpha
compositing of projected Gaussians, plus a brute-force reference renderer
used as a correctness oracle.

The tiled path records gradients w.r.t. every Gaussian attribute: the
per-Gaussian projection/color preprocessing is built from Tensor ops and
the per-pixel compositing is a fused op backed by kernels.py.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffgrad as dg
from . import kernels
from .diffgrad import Tensor
from .gaussians import (
    DEFAULT_ZNEAR,
    GaussianSet,
    camera_space_t,
    covariance_from_rotation_scale,
    evaluate_sh_color,
    project_covariance_t,
    project_gaussian,
    project_points_t,
    covariance_from_rotation_scale_t,
    evaluate_sh_colors_t,
    view_directions_t,
)

_DET_EPS = 1e-12


@dataclass
class RasterizerConfig:
    tile_size: int = 16
    znear: float = DEFAULT_ZNEAR
    sigma_clamp: float = 0.99
    stop_transmittance: float = 1e-4
    footprint_sigma: float = 3.0
    # footprints additionally extend until the per-Gaussian tail weight
    # alpha*exp(-r^2/2) drops below this, so culling error stays bounded
    tail_epsilon: float = 1e-6
    enable_footprint_cull: bool = True
    enable_early_termination: bool = True


class TileGrid:
    """Per-tile depth-sorted entry lists over the image plane."""

    def __init__(self, tile_size, tiles_x, tiles_y, offsets, entries, width, height):
        self.tile_size = tile_size
        self.tiles_x = tiles_x
        self.tiles_y = tiles_y
        self.offsets = offsets
        self.entries = entries
        self.width = width
        self.height = height

    def tile_list(self, tx, ty):
        tid = ty * self.tiles_x + tx
        return self.entries[self.offsets[tid] : self.offsets[tid + 1]]

    @property
    def entry_count(self):
        return int(self.entries.shape[0])


class RenderedImage:
    """pixels: (H,W,3) Tensor in [0,1]; alpha: (H,W) accumulated opacity."""

    def __init__(self, pixels, alpha, final_transmittance=None, n_contrib=None,
                 grid=None, degenerate_skipped=0):
        self.pixels = pixels
        self.alpha = alpha
        self.final_transmittance = final_transmittance
        self.n_contrib = n_contrib
        self.grid = grid
        self.degenerate_skipped = degenerate_skipped

    def array(self):
        return self.pixels.data


def _footprint_radii(cov_a, cov_b, cov_c, alphas, config):
    mid = 0.5 * (cov_a + cov_c)
    det = cov_a * cov_c - cov_b * cov_b
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    mah = np.full_like(lam_max, config.footprint_sigma)
    grows = alphas > config.tail_epsilon
    with np.errstate(divide="ignore", invalid="ignore"):
        needed = np.sqrt(2.0 * np.log(alphas / config.tail_epsilon, where=grows,
                                      out=np.zeros_like(alphas)))
    mah = np.maximum(mah, np.where(grows, needed, 0.0))
    return np.ceil(mah * np.sqrt(lam_max))


def build_tile_grid(means2d, cov_a, cov_b, cov_c, alphas, depths, width, height,
                    config):
    """Assign Gaussians to the tiles their footprint overlaps and sort each
    tile's list by depth (ties by Gaussian index ascending)."""
    ts = config.tile_size
    tiles_x = (width + ts - 1) // ts
    tiles_y = (height + ts - 1) // ts
    n_tiles = tiles_x * tiles_y
    g = means2d.shape[0]
    if g == 0:
        return TileGrid(ts, tiles_x, tiles_y, np.zeros(n_tiles + 1, np.int64),
                        np.zeros(0, np.int64), width, height)
    if config.enable_footprint_cull:
        radii = _footprint_radii(cov_a, cov_b, cov_c, alphas, config)
        # non-finite projections (diverged parameters) cover everything so
        # the resulting NaN pixels surface in the loss instead of crashing
        bad = ~(np.isfinite(means2d).all(axis=1) & np.isfinite(radii))
        mx = np.where(bad, 0.0, means2d[:, 0])
        my = np.where(bad, 0.0, means2d[:, 1])
        radii = np.where(bad, np.inf, radii)
        x0 = np.clip(np.floor((mx - radii) / ts), 0, tiles_x).astype(np.int64)
        x1 = np.clip(np.floor((mx + radii) / ts) + 1, 0, tiles_x).astype(np.int64)
        y0 = np.clip(np.floor((my - radii) / ts), 0, tiles_y).astype(np.int64)
        y1 = np.clip(np.floor((my + radii) / ts) + 1, 0, tiles_y).astype(np.int64)
    else:
        x0 = np.zeros(g, np.int64)
        x1 = np.full(g, tiles_x, np.int64)
        y0 = np.zeros(g, np.int64)
        y1 = np.full(g, tiles_y, np.int64)
    rect_w = np.maximum(x1 - x0, 0)
    rect_h = np.maximum(y1 - y0, 0)
    counts = rect_w * rect_h
    total = int(counts.sum())
    if total == 0:
        return TileGrid(ts, tiles_x, tiles_y, np.zeros(n_tiles + 1, np.int64),
                        np.zeros(0, np.int64), width, height)
    gauss_of_entry = np.repeat(np.arange(g, dtype=np.int64), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    cell_x = x0[gauss_of_entry] + within % rect_w[gauss_of_entry]
    cell_y = y0[gauss_of_entry] + within // rect_w[gauss_of_entry]
    tile_of_entry = cell_y * tiles_x + cell_x
    order = np.lexsort((gauss_of_entry, depths[gauss_of_entry], tile_of_entry))
    entries = gauss_of_entry[order]
    sorted_tiles = tile_of_entry[order]
    offsets = np.searchsorted(sorted_tiles, np.arange(n_tiles + 1), side="left")
    return TileGrid(ts, tiles_x, tiles_y, offsets.astype(np.int64), entries,
                    width, height)


def _background_image(camera, background, dtype):
    img = np.empty((camera.height, camera.width, 3), dtype=dtype)
    img[:] = np.asarray(background, dtype=dtype)[None, None, :]
    return RenderedImage(
        pixels=Tensor(img),
        alpha=np.zeros((camera.height, camera.width), dtype=dtype),
        final_transmittance=np.ones((camera.height, camera.width)),
        n_contrib=np.zeros((camera.height, camera.width), np.int32),
    )


def _sh_degree_for(bands):
    degree = math.isqrt(bands) - 1
    if (degree + 1) ** 2 != bands or degree > 3:
        raise ValueError(f"SH band count {bands} is not (L+1)^2 for L in 0..3")
    return degree


def rasterize(gaussians, camera, background=(0.0, 0.0, 0.0), config=None):
    """Tile-based differentiable render of a GaussianSet.

    Returns a RenderedImage whose pixels Tensor participates in the
    recorded graph w.r.t. all Gaussian attributes. Gaussians behind
    znear are culled; ones with a degenerate projected covariance are
    skipped and counted in `degenerate_skipped`.
    """
    cfg = config or RasterizerConfig()
    if gaussians is None or gaussians.count == 0:
        return _background_image(camera, background, np.float32)
    dtype = gaussians.centers.dtype
    cam_all = camera_space_t(gaussians.centers, camera)
    keep = np.nonzero(cam_all.data[:, 2] > cfg.znear)[0]
    if keep.size == 0:
        return _background_image(camera, background, dtype)

    cam_pts = dg.gather_rows(cam_all, keep)
    centers = dg.gather_rows(gaussians.centers, keep)
    rotations = dg.gather_rows(gaussians.rotation, keep)
    log_scales = dg.gather_rows(gaussians.log_scale, keep)
    sh = dg.gather_rows(gaussians.sh_coeffs, keep)
    logits = dg.gather_rows(gaussians.opacity_logit, keep)
    depths = cam_all.data[keep, 2]

    cov3d = covariance_from_rotation_scale_t(rotations, dg.exp(log_scales))
    if gaussians.cov_transform is not None:
        t = dg.gather_rows(gaussians.cov_transform, keep)
        cov3d = dg.matmul(dg.matmul(t, cov3d), t.transpose((0, 2, 1)))
    cov_a, cov_b, cov_c = project_covariance_t(cov3d, cam_pts, camera)
    det_vals = cov_a.data * cov_c.data - cov_b.data * cov_b.data
    degenerate_skipped = 0
    if np.any(det_vals <= _DET_EPS):
        good = np.nonzero(det_vals > _DET_EPS)[0]
        degenerate_skipped = int(det_vals.shape[0] - good.shape[0])
        if good.size == 0:
            out = _background_image(camera, background, dtype)
            out.degenerate_skipped = degenerate_skipped
            return out
        cam_pts = dg.gather_rows(cam_pts, good)
        centers = dg.gather_rows(centers, good)
        sh = dg.gather_rows(sh, good)
        logits = dg.gather_rows(logits, good)
        cov_a, cov_b, cov_c = (
            dg.gather_rows(cov_a, good),
            dg.gather_rows(cov_b, good),
            dg.gather_rows(cov_c, good),
        )
        depths = depths[good]

    mean2d = project_points_t(cam_pts, camera)
    det_t = cov_a * cov_c - cov_b * cov_b
    conic = dg.stack([cov_c / det_t, cov_b * (-1.0) / det_t, cov_a / det_t], axis=1)
    degree = _sh_degree_for(sh.shape[1])
    colors = evaluate_sh_colors_t(sh, view_directions_t(centers, camera), degree)
    alphas = dg.sigmoid(logits)

    grid = build_tile_grid(
        mean2d.data, cov_a.data, cov_b.data, cov_c.data, alphas.data, depths,
        camera.width, camera.height, cfg,
    )
    bg64 = np.asarray(background, np.float64)
    stop_t = cfg.stop_transmittance if cfg.enable_early_termination else 0.0
    img64, final_t, n_contrib = kernels.composite_forward(
        mean2d.data, conic.data, colors.data, alphas.data,
        grid.entries, grid.offsets, grid.tiles_x, cfg.tile_size,
        camera.width, camera.height, bg64, stop_t, cfg.sigma_clamp,
    )

    def _backward(g):
        gm, gq, gc, ga = kernels.composite_backward(
            mean2d.data, conic.data, colors.data, alphas.data,
            grid.entries, grid.offsets, grid.tiles_x, cfg.tile_size,
            camera.width, camera.height, bg64, stop_t, cfg.sigma_clamp,
            g, final_t, n_contrib,
        )
        return (gm.astype(dtype), gq.astype(dtype), gc.astype(dtype),
                ga.astype(dtype))

    pixels = Tensor._from_op(
        img64.astype(dtype), (mean2d, conic, colors, alphas), _backward
    )
    return RenderedImage(
        pixels=pixels,
        alpha=(1.0 - final_t).astype(dtype),
        final_transmittance=final_t,
        n_contrib=n_contrib,
        grid=grid,
        degenerate_skipped=degenerate_skipped,
    )


def rasterize_reference(gaussians, camera, background=(0.0, 0.0, 0.0), config=None):
    """Brute-force oracle: globally depth-sort all non-culled Gaussians and
    composite every one at every pixel (no tiling, no footprint cull, no
    early termination). Intended for small scenes."""
    cfg = config or RasterizerConfig()
    height, width = camera.height, camera.width
    if gaussians is None or gaussians.count == 0:
        return _background_image(camera, background, np.float32)
    dtype = gaussians.centers.dtype
    mu = gaussians.centers.data.astype(np.float64)
    quats = gaussians.rotation.data.astype(np.float64)
    scales = np.exp(gaussians.log_scale.data.astype(np.float64))
    sh = gaussians.sh_coeffs.data.astype(np.float64)
    alphas_all = 1.0 / (1.0 + np.exp(-gaussians.opacity_logit.data.astype(np.float64)))
    degree = _sh_degree_for(sh.shape[1])
    cam_center = camera.center

    cov_t = (
        None
        if gaussians.cov_transform is None
        else gaussians.cov_transform.data.astype(np.float64)
    )
    means, conics, colors, alphas, depths, index = [], [], [], [], [], []
    for i in range(gaussians.count):
        sigma = covariance_from_rotation_scale(quats[i], scales[i])
        if cov_t is not None:
            sigma = cov_t[i] @ sigma @ cov_t[i].T
        proj = project_gaussian(mu[i], sigma, camera, cfg.znear)
        if proj.culled:
            continue
        det = np.linalg.det(proj.cov2d)
        if det <= _DET_EPS:
            continue
        inv = np.linalg.inv(proj.cov2d)
        direction = mu[i] - cam_center
        direction = direction / np.linalg.norm(direction)
        means.append(proj.mean2d)
        conics.append((inv[0, 0], inv[0, 1], inv[1, 1]))
        colors.append(evaluate_sh_color(sh[i], direction, degree))
        alphas.append(alphas_all[i])
        depths.append(proj.depth)
        index.append(i)
    out = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    if means:
        order = np.lexsort((np.asarray(index), np.asarray(depths)))
        ys, xs = np.mgrid[0:height, 0:width]
        for k in order:
            mx, my = means[k]
            qa, qb, qc = conics[k]
            dx = xs - mx
            dy = ys - my
            power = -0.5 * (qa * dx * dx + qc * dy * dy) - qb * dx * dy
            sigma = np.minimum(alphas[k] * np.exp(power), cfg.sigma_clamp)
            out += (sigma * trans)[:, :, None] * np.asarray(colors[k])[None, None, :]
            trans = trans * (1.0 - sigma)
    out += trans[:, :, None] * np.asarray(background, np.float64)[None, None, :]
    return RenderedImage(
        pixels=Tensor(out.astype(dtype)),
        alpha=(1.0 - trans).astype(dtype),
        final_transmittance=trans,
    )

"""Stage 1: per-instance multi-view fusion.

Lift encoder features to each Gaussian by projecting its center into the
context views, fuse the per-view feature sets with a fixed
gamma-weighted propagation, and decode residual updates for appearance
and local geometry plus a pooled per-instance feature. Centers are never
touched in this stage.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import diffgrad as dg
from . import nn
from .diffgrad import Tensor
from .gaussians import DEFAULT_ZNEAR, camera_space_t

FEATURE_CHANNELS = 32


@dataclass
class FusionConfig:
    gamma: float = 0.1
    context_view_count: int = 4
    instance_feature_dim: int = 64


@dataclass
class FeatureMap:
    features: Tensor  # (H, W, C) at full image resolution
    source_view: int


def encode_image(encoder, image, source_view):
    """Run the conv encoder over an (H,W,3) image in [0,1]."""
    img = image if isinstance(image, Tensor) else Tensor(image)
    return FeatureMap(features=encoder(img), source_view=source_view)


def lift_features(feature_map, centers, camera):
    """Project centers into the feature map's view and bilinearly sample.

    Centers behind the camera or outside the image yield zero vectors.
    Differentiable in the feature map and (through the projection) in the
    centers.
    """
    if camera.cam_id != feature_map.source_view:
        raise ValueError(
            f"camera {camera.cam_id} does not match feature map view "
            f"{feature_map.source_view}"
        )
    cam_pts = camera_space_t(centers, camera)
    z = cam_pts[:, 2]
    in_front = cam_pts.data[:, 2] > DEFAULT_ZNEAR
    # clamp keeps the division finite for culled rows; their samples are
    # zeroed by the valid mask anyway
    z_safe = dg.clamp(z, DEFAULT_ZNEAR, None)
    u = cam_pts[:, 0] / z_safe * float(camera.fx) + float(camera.cx)
    v = cam_pts[:, 1] / z_safe * float(camera.fy) + float(camera.cy)
    positions = dg.stack([u, v], axis=1)
    return nn.bilinear_sample(feature_map.features, positions, valid=in_front)


def view_dependent_features(visual, gaussians):
    """Concat lifted visual features with the instance's current activated
    attributes: [f_vis, sh, alpha, unit rotation, scale]."""
    g = gaussians.count
    return dg.concatenate(
        [
            visual,
            gaussians.sh_coeffs.reshape(g, -1),
            gaussians.opacity().reshape(g, 1),
            gaussians.unit_rotations(),
            gaussians.scale(),
        ],
        axis=1,
    )


def feature_width(band_count, channels=FEATURE_CHANNELS):
    return channels + band_count * 3 + 1 + 4 + 3


def select_context_views(instance_masks, n_ctx):
    """Rank views by the instance's mask pixel count (descending, ties by
    camera id ascending) and return the top n_ctx camera ids, padding with
    the remaining views in id order when fewer have nonzero area."""
    if n_ctx <= 0:
        raise ValueError("need at least one context view")
    areas = {cam_id: int(np.count_nonzero(m)) for cam_id, m in instance_masks.items()}
    visible = sorted(
        (cid for cid, a in areas.items() if a > 0),
        key=lambda cid: (-areas[cid], cid),
    )
    if not visible:
        warnings.warn("instance invisible in every view; using first views by id")
    rest = sorted(cid for cid, a in areas.items() if a == 0)
    ranked = visible + rest
    return ranked[:n_ctx]


def cross_view_fuse(per_view, gamma):
    """Fixed-weight cross-view propagation.

    fused = (1/N) sum_j (f_j + gamma * sum_{p != j} f_p) / Z with
    Z = 1 + gamma (N - 1), an affine combination with total weight one.
    """
    n = len(per_view)
    if n == 0:
        raise ValueError("cross_view_fuse needs at least one view")
    z = 1.0 + gamma * (n - 1)
    total = per_view[0]
    for f in per_view[1:]:
        total = total + f
    acc = None
    for f in per_view:
        inner = (f + (total - f) * gamma) * (1.0 / z)
        acc = inner if acc is None else acc + inner
    return acc * (1.0 / n)


class FusionDecoder:
    """Maps fused per-Gaussian features to residual attribute updates and
    a pooled instance feature.

    The residual head is zero-initialized so the stage starts as the
    identity on attributes. The instance head is NOT: its output reaches
    rendering only through the interaction decoder's zero-initialized
    final layer, and zeroing both would leave the graph attention stage
    with no gradient signal to bootstrap from.
    """

    def __init__(self, rng, band_count, instance_feature_dim=64,
                 channels=FEATURE_CHANNELS, name="fusion_decoder",
                 color_bands="all"):
        if color_bands not in ("all", "band0"):
            raise ValueError("color_bands must be 'all' or 'band0'")
        in_dim = feature_width(band_count, channels)
        self.band_count = band_count
        self.color_bands = 1 if color_bands == "band0" else band_count
        self.residual_dim = self.color_bands * 3 + 1 + 4 + 3
        self.trunk = nn.Mlp(rng, in_dim, [128], 64, f"{name}.trunk")
        self.residual_head = nn.Linear(rng, 64, self.residual_dim,
                                       f"{name}.residual", zero_init=True)
        self.instance_head = nn.Linear(rng, 64, instance_feature_dim,
                                       f"{name}.instance")

    def __call__(self, fused):
        trunk = dg.relu(self.trunk(fused))
        return self.residual_head(trunk), self.instance_head(trunk)

    def parameters(self):
        return (
            self.trunk.parameters()
            + self.residual_head.parameters()
            + self.instance_head.parameters()
        )


def decode_fusion(decoder, fused, gaussians):
    """Apply residual updates (centers frozen) and pool the instance
    feature; returns (refined GaussianSet, instance feature Tensor)."""
    residual, per_gauss = decoder(fused)
    g = gaussians.count
    cb = decoder.color_bands
    d_sh = residual[:, : cb * 3].reshape(g, cb, 3)
    if cb < gaussians.band_count:
        new_sh = dg.concatenate(
            [gaussians.sh_coeffs[:, :cb, :] + d_sh, gaussians.sh_coeffs[:, cb:, :]],
            axis=1,
        )
    else:
        new_sh = gaussians.sh_coeffs + d_sh
    d_logit = residual[:, cb * 3]
    d_rot = residual[:, cb * 3 + 1 : cb * 3 + 5]
    d_scale = residual[:, cb * 3 + 5 :]
    refined = gaussians.replace(
        sh_coeffs=new_sh,
        opacity_logit=gaussians.opacity_logit + d_logit,
        rotation=gaussians.rotation + d_rot,
        log_scale=gaussians.log_scale + d_scale,
    )
    return refined, per_gauss.mean(axis=0)


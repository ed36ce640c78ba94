"""Stage 0: pose canonical templates into the frame.

Humans use modulated linear blend skinning: a small MLP predicts
per-vertex, per-joint logits added to the template skinning weights
before a row softmax; centers blend joint transforms and covariances are
conjugated by the blended rotation matrix. Objects apply one rigid
transform. Both paths produce the initial per-frame Gaussian state.

LBS is evaluated in displacement form,
    mu0 = mu_c + sum_k w_k ((R_k - I) mu_c + t_k) + b,
algebraically identical to the weighted-average form for row-stochastic
weights but exact at the identity pose regardless of weight rounding.
"""

from __future__ import annotations

import numpy as np

from . import diffgrad as dg
from . import nn
from .diffgrad import Tensor
from .gaussians import (
    GaussianSet,
    compose_quaternions_left_const,
    quat_from_rotmat,
    quat_from_rotmat_batch,
)

MODULATION_BOUND = 5.0
SINGLE_VERTEX_SCALE = 0.01
_ORTHO_TOL = 1e-6


def _check_rotation(R, what):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"{what} must be 3x3")
    if not np.allclose(R @ R.T, np.eye(3), atol=_ORTHO_TOL):
        raise ValueError(f"{what} is not orthonormal within {_ORTHO_TOL}")
    if np.linalg.det(R) < 0:
        raise ValueError(f"{what} must have determinant +1")
    return R


class SkinnedTemplate:
    """Canonical geometry with optional skinning weights and blend offsets."""

    def __init__(self, canonical_centers, skinning_weights=None, blend_offsets=None,
                 kind="human"):
        self.canonical_centers = np.asarray(canonical_centers, dtype=np.float64)
        if self.canonical_centers.ndim != 2 or self.canonical_centers.shape[1] != 3:
            raise ValueError("canonical centers must be (V,3)")
        if self.canonical_centers.shape[0] < 1:
            raise ValueError("a template needs at least one vertex")
        self.kind = kind
        v = self.canonical_centers.shape[0]
        if skinning_weights is not None:
            w = np.asarray(skinning_weights, dtype=np.float64)
            if w.shape[0] != v or w.ndim != 2:
                raise ValueError("skinning weights must be (V,K)")
            if np.any(w < 0):
                raise ValueError("skinning weights must be non-negative")
            sums = w.sum(axis=1)
            bad = np.nonzero(np.abs(sums - 1.0) > 1e-6)[0]
            if bad.size:
                raise ValueError(
                    f"skinning weight row {bad[0]} sums to {sums[bad[0]]!r}, not 1"
                )
            self.skinning_weights = w
        else:
            self.skinning_weights = None
        if blend_offsets is not None:
            b = np.asarray(blend_offsets, dtype=np.float64)
            if b.shape != self.canonical_centers.shape:
                raise ValueError("blend offsets must be (V,3)")
            self.blend_offsets = b
        else:
            self.blend_offsets = np.zeros_like(self.canonical_centers)

    @property
    def vertex_count(self):
        return self.canonical_centers.shape[0]

    @property
    def joint_count(self):
        if self.skinning_weights is None:
            return 0
        return self.skinning_weights.shape[1]


class JointTransforms:
    """World-space per-joint rigid transforms (R_k, t_k)."""

    def __init__(self, rotations, translations):
        rotations = np.asarray(rotations, dtype=np.float64)
        translations = np.asarray(translations, dtype=np.float64)
        if rotations.ndim != 3 or rotations.shape[1:] != (3, 3):
            raise ValueError("joint rotations must be (K,3,3)")
        if translations.shape != (rotations.shape[0], 3):
            raise ValueError("joint translations must be (K,3)")
        for k in range(rotations.shape[0]):
            _check_rotation(rotations[k], f"joint rotation {k}")
        self.rotations = rotations
        self.translations = translations

    @property
    def joint_count(self):
        return self.rotations.shape[0]

    @staticmethod
    def from_matrices(mats):
        mats = np.asarray(mats, dtype=np.float64).reshape(-1, 4, 4)
        return JointTransforms(mats[:, :3, :3], mats[:, :3, 3])


class RigidPose:
    def __init__(self, rotation, translation):
        self.rotation = _check_rotation(rotation, "rigid pose rotation")
        self.translation = np.asarray(translation, dtype=np.float64).reshape(3)

    @staticmethod
    def from_matrix(mat):
        mat = np.asarray(mat, dtype=np.float64).reshape(4, 4)
        return RigidPose(mat[:3, :3], mat[:3, 3])


class WeightModulator:
    """Per-vertex joint-weight modulation MLP over positionally encoded
    canonical centers. The final layer is zero-initialized, so modulation
    starts at exactly zero; outputs are squashed to |m| <= 5."""

    OCTAVES = 4

    def __init__(self, rng, joint_count, hidden=(64, 64), name="lbs_mlp"):
        in_dim = 3 * (1 + 2 * self.OCTAVES)
        self.joint_count = joint_count
        self.mlp = nn.Mlp(rng, in_dim, list(hidden), joint_count, name,
                          zero_init_last=True)

    def __call__(self, canonical_centers):
        x = canonical_centers
        if not isinstance(x, Tensor):
            # float64 inputs stay float64 (gradient verification path)
            x = Tensor(np.asarray(x))
        encoded = nn.positional_encoding(x, self.OCTAVES)
        return dg.tanh(self.mlp(encoded)) * MODULATION_BOUND

    def parameters(self):
        return self.mlp.parameters()


def predict_modulation(modulator, template):
    return modulator(template.canonical_centers.astype(np.float32))


def modulate_weights(base_weights, modulation):
    """w = softmax(w_base + m) over joints, rows summing to one."""
    base = Tensor(np.asarray(base_weights, dtype=modulation.dtype))
    if base.shape != modulation.shape:
        raise ValueError(
            f"weight/modulation shape mismatch: {base.shape} vs {modulation.shape}"
        )
    return dg.softmax(base + modulation, axis=1)


def lbs_pose_centers(template, joints, weights):
    """Blend joint transforms per vertex (displacement form; see module
    docstring). Differentiable w.r.t. the weights."""
    if weights.shape != (template.vertex_count, joints.joint_count):
        raise ValueError(
            f"weights shape {weights.shape} does not match "
            f"(V={template.vertex_count}, K={joints.joint_count})"
        )
    dtype = weights.dtype
    mu_c = Tensor(template.canonical_centers.astype(dtype))
    out = mu_c + Tensor(template.blend_offsets.astype(dtype))
    for k in range(joints.joint_count):
        rel = (
            template.canonical_centers @ (joints.rotations[k] - np.eye(3)).T
            + joints.translations[k]
        )
        out = out + weights[:, k].reshape(-1, 1) * Tensor(rel.astype(dtype))
    return out


def lbs_blend_rotations(joints, weights):
    """Effective blended rotation B = I + sum_k w_k (R_k - I), shape (V,3,3).
    Generally not orthonormal."""
    v = weights.shape[0]
    dtype = weights.dtype
    eye = np.broadcast_to(np.eye(3, dtype=dtype), (v, 3, 3)).copy()
    out = Tensor(eye)
    for k in range(joints.joint_count):
        rel = (joints.rotations[k] - np.eye(3)).astype(dtype)
        out = out + weights[:, k].reshape(v, 1, 1) * Tensor(
            np.broadcast_to(rel, (v, 3, 3)).copy()
        )
    return out


def lbs_pose_covariance(canonical_cov, joints, weights):
    """Sigma0 = B Sigma_c B^T with B the blended rotation; returns
    (Sigma0, B). B may be rank-deficient for degenerate blends; the
    rasterizer's screen-space floor absorbs that."""
    blend = lbs_blend_rotations(joints, weights)
    cov = canonical_cov if isinstance(canonical_cov, Tensor) else Tensor(canonical_cov)
    posed = dg.matmul(dg.matmul(blend, cov), blend.transpose((0, 2, 1)))
    return posed, blend


def pose_rigid_object(template_centers, pose):
    """Apply (R_obj, T_obj) to canonical vertices."""
    centers = np.asarray(template_centers, dtype=np.float64)
    return centers @ pose.rotation.T + pose.translation


def nearest_rotation(matrices):
    """Orthonormal polar factors (det +1) of a (V,3,3) batch."""
    u, _, vt = np.linalg.svd(np.asarray(matrices, dtype=np.float64))
    dets = np.linalg.det(u @ vt)
    u = u.copy()
    u[:, :, 2] *= np.sign(dets)[:, None]
    return u @ vt


def initialize_gaussian_attributes(posed_centers, sh_bands=4,
                                   default_scale=SINGLE_VERTEX_SCALE):
    """Generic starting attributes: gray color (all SH coefficients zero),
    opacity 1/2, identity rotation, isotropic scale at half the mean
    nearest-neighbor spacing (falling back to default_scale for a single
    vertex)."""
    centers = np.asarray(posed_centers, dtype=np.float32)
    v = centers.shape[0]
    if v > 1:
        diff = centers[:, None, :] - centers[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        scale = 0.5 * float(np.sqrt(d2.min(axis=1)).mean())
    else:
        scale = default_scale
    rot = np.zeros((v, 4), dtype=np.float32)
    rot[:, 0] = 1.0
    return GaussianSet(
        centers=centers,
        sh_coeffs=np.zeros((v, sh_bands, 3), dtype=np.float32),
        opacity_logit=np.zeros(v, dtype=np.float32),
        rotation=rot,
        log_scale=np.full((v, 3), np.log(scale), dtype=np.float32),
    )


def pose_human(template, joints, canonical, modulator=None,
               use_raw_blend_covariance=True):
    """Pose a human instance's canonical GaussianSet into the frame.

    Centers follow modulated LBS; the stored quaternion becomes the
    nearest rotation of the blend composed with the canonical quaternion,
    while the raw (non-orthonormal) residual of the blend is carried in
    cov_transform so the rendered covariance equals B Sigma_c B^T exactly.
    Setting use_raw_blend_covariance=False drops the residual and uses the
    orthonormal approximation only.
    """
    if template.skinning_weights is None:
        raise ValueError("human template has no skinning weights")
    if modulator is not None:
        m = modulator(template.canonical_centers.astype(np.float32))
        weights = modulate_weights(template.skinning_weights, m)
    else:
        weights = Tensor(template.skinning_weights.astype(np.float32))
    mu0 = lbs_pose_centers(template, joints, weights)
    blend = lbs_blend_rotations(joints, weights)
    nearest = nearest_rotation(blend.data)
    unit_quats = quat_from_rotmat_batch(nearest)
    rot0 = compose_quaternions_left_const(unit_quats, canonical.rotation)
    if use_raw_blend_covariance:
        residual = dg.matmul(
            blend, Tensor(np.swapaxes(nearest, 1, 2).astype(blend.dtype))
        )
    else:
        residual = None
    return GaussianSet(
        centers=mu0,
        sh_coeffs=canonical.sh_coeffs,
        opacity_logit=canonical.opacity_logit,
        rotation=rot0,
        log_scale=canonical.log_scale,
        cov_transform=residual,
    )


def pose_object(template, pose, canonical):
    """Pose a rigid object instance: translate/rotate centers and compose
    the object rotation into the per-Gaussian quaternions."""
    posed = pose_rigid_object(template.canonical_centers, pose)
    dtype = canonical.centers.dtype
    q_obj = np.broadcast_to(
        quat_from_rotmat(pose.rotation), (template.vertex_count, 4)
    )
    return GaussianSet(
        centers=Tensor(posed.astype(dtype)),
        sh_coeffs=canonical.sh_coeffs,
        opacity_logit=canonical.opacity_logit,
        rotation=compose_quaternions_left_const(q_obj, canonical.rotation),
        log_scale=canonical.log_scale,
    )

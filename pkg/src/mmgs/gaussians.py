"""Gaussian primitive data model: attribute storage, covariance
construction, spherical-harmonic color, and pinhole/EWA projection.

Most functions come in two flavors: a plain-numpy single-primitive form
(used by tests and the brute-force reference renderer) and a batched
Tensor form (suffix ``_t``) that participates in the recorded gradient
graph used by the tiled rasterizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgrad as dg
from .diffgrad import Tensor

# real SH basis constants (degree 0..3)
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

COV2D_FLOOR = 0.3  # px^2 low-pass added to projected covariance diagonals
DEFAULT_ZNEAR = 0.01


def sh_band_count(degree):
    if degree not in (0, 1, 2, 3):
        raise ValueError(f"SH degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2


def sh_basis(dirs):
    """Real SH basis values for unit directions, shape (..., B)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    cols = [np.full_like(x, SH_C0)]
    cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    xx, yy, zz = x * x, y * y, z * z
    cols += [
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
    ]
    cols += [
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
    return np.stack(cols, axis=-1)


def sh_basis_t(dirs, degree):
    """Tensor version of sh_basis restricted to the configured degree."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    cols = [x * 0.0 + SH_C0]
    if degree >= 1:
        cols += [y * -SH_C1, z * SH_C1, x * -SH_C1]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            x * y * SH_C2[0],
            y * z * SH_C2[1],
            (zz * 2.0 - xx - yy) * SH_C2[2],
            x * z * SH_C2[3],
            (xx - yy) * SH_C2[4],
        ]
    if degree >= 3:
        cols += [
            y * (xx * 3.0 - yy) * SH_C3[0],
            x * y * z * SH_C3[1],
            y * (zz * 4.0 - xx - yy) * SH_C3[2],
            z * (zz * 2.0 - xx * 3.0 - yy * 3.0) * SH_C3[3],
            x * (zz * 4.0 - xx - yy) * SH_C3[4],
            z * (xx - yy) * SH_C3[5],
            x * (xx - yy * 3.0) * SH_C3[6],
        ]
    return dg.stack(cols, axis=1)


def evaluate_sh_color(sh_coeffs, view_dir, degree=None):
    """View-dependent rgb in [0,1] for one Gaussian: clamp(Y.c + 0.5)."""
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    bands = sh_coeffs.shape[0]
    if degree is not None and bands != sh_band_count(degree):
        raise ValueError(
            f"expected {sh_band_count(degree)} SH bands for degree {degree}, "
            f"got {bands}"
        )
    if bands not in (1, 4, 9, 16):
        raise ValueError(f"SH coefficient count {bands} is not (L+1)^2 for L in 0..3")
    basis = sh_basis(view_dir)[..., :bands]
    rgb = basis @ sh_coeffs + 0.5
    return np.clip(rgb, 0.0, 1.0)


def evaluate_sh_colors_t(sh_coeffs, dirs, degree):
    """Batched Tensor SH color: (G,B,3) coeffs, (G,3) unit dirs -> (G,3)."""
    basis = sh_basis_t(dirs, degree)  # (G, B)
    g, b = basis.shape
    weighted = dg.matmul(basis.reshape(g, 1, b), sh_coeffs)  # (G,1,3)
    return dg.clamp(weighted.reshape(g, 3) + 0.5, 0.0, 1.0)


def quat_to_rotmat(q):
    """3x3 rotation from a (w,x,y,z) quaternion; normalizes first."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("cannot normalize a zero quaternion")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_to_rotmat_t(q):
    """Tensor batch version: (G,4) raw quaternions -> (G,3,3) rotations."""
    norm = dg.sqrt((q * q).sum(axis=1, keepdims=True))
    u = q / norm
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    row0 = dg.stack(
        [1.0 - (y * y + z * z) * 2.0, (x * y - w * z) * 2.0, (x * z + w * y) * 2.0],
        axis=1,
    )
    row1 = dg.stack(
        [(x * y + w * z) * 2.0, 1.0 - (x * x + z * z) * 2.0, (y * z - w * x) * 2.0],
        axis=1,
    )
    row2 = dg.stack(
        [(x * z - w * y) * 2.0, (y * z + w * x) * 2.0, 1.0 - (x * x + y * y) * 2.0],
        axis=1,
    )
    return dg.stack([row0, row1, row2], axis=1)


def covariance_from_rotation_scale(r, s):
    """Sigma = R diag(s) diag(s) R^T for one Gaussian."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("scales must be strictly positive")
    R = quat_to_rotmat(r)
    M = R * s[None, :]
    return M @ M.T


def covariance_from_rotation_scale_t(rotations, scales):
    """Batched Tensor covariance: (G,4) raw quats, (G,3) scales -> (G,3,3)."""
    R = quat_to_rotmat_t(rotations)
    M = R * scales.reshape(scales.shape[0], 1, 3)
    return dg.matmul(M, M.transpose((0, 2, 1)))


@dataclass
class Camera:
    """Pinhole camera: intrinsics K, world-to-camera [R|t], image size."""

    cam_id: int
    K: np.ndarray
    W: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.W = np.asarray(self.W, dtype=np.float64).reshape(3, 4)
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.W[:, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("extrinsic rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("extrinsic rotation must have determinant +1")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def R(self):
        return self.W[:, :3]

    @property
    def t(self):
        return self.W[:, 3]

    @property
    def center(self):
        """Camera position in world space."""
        return -self.R.T @ self.t

    @property
    def fx(self):
        return self.K[0, 0]

    @property
    def fy(self):
        return self.K[1, 1]

    @property
    def cx(self):
        return self.K[0, 2]

    @property
    def cy(self):
        return self.K[1, 2]

    @staticmethod
    def look_at(cam_id, eye, target, up, focal, width, height):
        """Camera at `eye` looking toward `target` (+z forward)."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=0)
        t = -R @ eye
        K = np.array(
            [[focal, 0, width / 2.0], [0, focal, height / 2.0], [0, 0, 1]]
        )
        return Camera(cam_id, K, np.concatenate([R, t[:, None]], axis=1), width, height)


class ProjectedGaussian:
    __slots__ = ("mean2d", "cov2d", "depth", "culled")

    def __init__(self, mean2d, cov2d, depth, culled):
        self.mean2d = mean2d
        self.cov2d = cov2d
        self.depth = depth
        self.culled = culled


def project_gaussian(mu, Sigma, camera, znear=DEFAULT_ZNEAR):
    """EWA projection of one Gaussian to pixel space.

    Returns mean2d (px), cov2d (px^2, with the low-pass floor applied),
    camera-space depth, and a culled flag for depth <= znear.
    """
    mu = np.asarray(mu, dtype=np.float64)
    t = camera.R @ mu + camera.t
    if t[2] <= znear:
        return ProjectedGaussian(None, None, float(t[2]), True)
    fx, fy = camera.fx, camera.fy
    tx, ty, tz = t
    mean2d = np.array([fx * tx / tz + camera.cx, fy * ty / tz + camera.cy])
    J = np.array(
        [
            [fx / tz, 0.0, -fx * tx / (tz * tz)],
            [0.0, fy / tz, -fy * ty / (tz * tz)],
        ]
    )
    V = camera.R @ np.asarray(Sigma, dtype=np.float64) @ camera.R.T
    cov2d = J @ V @ J.T + COV2D_FLOOR * np.eye(2)
    return ProjectedGaussian(mean2d, cov2d, float(tz), False)


def camera_space_t(centers, camera):
    """World centers (G,3) Tensor -> camera-space positions (G,3)."""
    R = Tensor(np.ascontiguousarray(camera.R.T, dtype=centers.dtype))
    t = Tensor(camera.t.astype(centers.dtype))
    return dg.matmul(centers, R) + t.reshape(1, 3)


def project_points_t(cam_pts, camera):
    """Camera-space points (G,3) Tensor -> pixel coordinates (G,2)."""
    fx, fy = float(camera.fx), float(camera.fy)
    cx, cy = float(camera.cx), float(camera.cy)
    u = cam_pts[:, 0] / cam_pts[:, 2] * fx + cx
    v = cam_pts[:, 1] / cam_pts[:, 2] * fy + cy
    return dg.stack([u, v], axis=1)


def project_covariance_t(cov3d, cam_pts, camera):
    """EWA covariance projection for a batch, returning the (a, b, c)
    entries of the symmetric 2x2 pixel covariance with the low-pass floor.
    """
    dtype = cov3d.dtype
    Rw = Tensor(camera.R.astype(dtype))
    V = dg.matmul(dg.matmul(Rw, cov3d), Tensor(camera.R.T.astype(dtype)))
    fx, fy = float(camera.fx), float(camera.fy)
    tx, ty, tz = cam_pts[:, 0], cam_pts[:, 1], cam_pts[:, 2]
    inv_z = 1.0 / tz
    j00 = inv_z * fx
    j11 = inv_z * fy
    j02 = tx * inv_z * inv_z * -fx
    j12 = ty * inv_z * inv_z * -fy
    v00, v01, v02 = V[:, 0, 0], V[:, 0, 1], V[:, 0, 2]
    v11, v12, v22 = V[:, 1, 1], V[:, 1, 2], V[:, 2, 2]
    a = j00 * j00 * v00 + (j00 * j02 * v02) * 2.0 + j02 * j02 * v22 + COV2D_FLOOR
    b = j00 * j11 * v01 + j00 * j12 * v02 + j02 * j11 * v12 + j02 * j12 * v22
    c = j11 * j11 * v11 + (j11 * j12 * v12) * 2.0 + j12 * j12 * v22 + COV2D_FLOOR
    return a, b, c


def view_directions_t(centers, camera):
    """Unit vectors from the camera center toward each Gaussian center."""
    delta = centers - Tensor(camera.center.astype(centers.dtype)).reshape(1, 3)
    norm = dg.sqrt((delta * delta).sum(axis=1, keepdims=True))
    return delta / norm


class GaussianSet:
    """Per-instance Gaussian attributes.

    Quaternions are stored raw and normalized at the point of use
    (covariance construction / exports); see unit_rotations. Opacity is
    stored as a logit and scale as a log, so the activated values are in
    (0,1) and (0,inf) by construction.

    cov_transform, when present, is a per-Gaussian (G,3,3) linear map
    applied around the quaternion/scale covariance (used to carry the raw
    skinning rotation blend, which is generally not orthonormal).
    """

    def __init__(self, centers, sh_coeffs, opacity_logit, rotation, log_scale,
                 cov_transform=None):
        self.centers = _tensor(centers)
        self.sh_coeffs = _tensor(sh_coeffs)
        self.opacity_logit = _tensor(opacity_logit)
        self.rotation = _tensor(rotation)
        self.log_scale = _tensor(log_scale)
        self.cov_transform = None if cov_transform is None else _tensor(cov_transform)
        g = self.centers.shape[0]
        for name in ("sh_coeffs", "opacity_logit", "rotation", "log_scale"):
            if getattr(self, name).shape[0] != g:
                raise ValueError(f"attribute {name} does not share leading dim {g}")
        if g and (self.centers.shape[1] != 3 or self.rotation.shape[1] != 4):
            raise ValueError("centers must be (G,3) and rotations (G,4)")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[2] != 3:
            raise ValueError("sh_coeffs must be (G,B,3)")
        if self.cov_transform is not None and self.cov_transform.shape != (g, 3, 3):
            raise ValueError("cov_transform must be (G,3,3)")

    @property
    def count(self):
        return self.centers.shape[0]

    @property
    def band_count(self):
        return self.sh_coeffs.shape[1]

    def opacity(self):
        return dg.sigmoid(self.opacity_logit)

    def scale(self):
        return dg.exp(self.log_scale)

    def unit_rotations(self):
        norm = dg.sqrt((self.rotation * self.rotation).sum(axis=1, keepdims=True))
        return self.rotation / norm

    def covariances(self):
        """World-space 3x3 covariances (G,3,3) as a Tensor graph node."""
        base = covariance_from_rotation_scale_t(self.rotation, self.scale())
        if self.cov_transform is None:
            return base
        t = self.cov_transform
        return dg.matmul(dg.matmul(t, base), t.transpose((0, 2, 1)))

    def replace(self, **fields):
        kwargs = {
            "centers": self.centers,
            "sh_coeffs": self.sh_coeffs,
            "opacity_logit": self.opacity_logit,
            "rotation": self.rotation,
            "log_scale": self.log_scale,
            "cov_transform": self.cov_transform,
        }
        kwargs.update(fields)
        return GaussianSet(**kwargs)


def _tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def concat_gaussian_sets(sets):
    """Concatenate per-instance sets into one scene-level set."""
    if not sets:
        raise ValueError("cannot concatenate zero GaussianSets")
    transforms = None
    if any(s.cov_transform is not None for s in sets):
        transforms = dg.concatenate(
            [
                s.cov_transform
                if s.cov_transform is not None
                else Tensor(
                    np.broadcast_to(
                        np.eye(3, dtype=s.centers.dtype), (s.count, 3, 3)
                    ).copy()
                )
                for s in sets
            ],
            axis=0,
        )
    return GaussianSet(
        centers=dg.concatenate([s.centers for s in sets], axis=0),
        sh_coeffs=dg.concatenate([s.sh_coeffs for s in sets], axis=0),
        opacity_logit=dg.concatenate([s.opacity_logit for s in sets], axis=0),
        rotation=dg.concatenate([s.rotation for s in sets], axis=0),
        log_scale=dg.concatenate([s.log_scale for s in sets], axis=0),
        cov_transform=transforms,
    )


def quat_from_rotmat(R):
    """(w,x,y,z) unit quaternion from a rotation matrix (numpy, single)."""
    R = np.asarray(R, dtype=np.float64)
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0:
        s = np.sqrt(trace + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
             (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s,
             (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s,
             (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
             (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return q / np.linalg.norm(q)


def quat_from_rotmat_batch(R):
    """Vectorized quat_from_rotmat over a (V,3,3) batch."""
    R = np.asarray(R, dtype=np.float64)
    r00, r11, r22 = R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]
    trace = r00 + r11 + r22
    q = np.empty((R.shape[0], 4))

    def guarded_sqrt(x):
        return np.sqrt(np.maximum(x, 1e-30)) * 2.0

    s_t = guarded_sqrt(trace + 1.0)
    cand_t = np.stack(
        [0.25 * s_t, (R[:, 2, 1] - R[:, 1, 2]) / s_t,
         (R[:, 0, 2] - R[:, 2, 0]) / s_t, (R[:, 1, 0] - R[:, 0, 1]) / s_t],
        axis=1,
    )
    s_x = guarded_sqrt(1.0 + r00 - r11 - r22)
    cand_x = np.stack(
        [(R[:, 2, 1] - R[:, 1, 2]) / s_x, 0.25 * s_x,
         (R[:, 0, 1] + R[:, 1, 0]) / s_x, (R[:, 0, 2] + R[:, 2, 0]) / s_x],
        axis=1,
    )
    s_y = guarded_sqrt(1.0 + r11 - r00 - r22)
    cand_y = np.stack(
        [(R[:, 0, 2] - R[:, 2, 0]) / s_y, (R[:, 0, 1] + R[:, 1, 0]) / s_y,
         0.25 * s_y, (R[:, 1, 2] + R[:, 2, 1]) / s_y],
        axis=1,
    )
    s_z = guarded_sqrt(1.0 + r22 - r00 - r11)
    cand_z = np.stack(
        [(R[:, 1, 0] - R[:, 0, 1]) / s_z, (R[:, 0, 2] + R[:, 2, 0]) / s_z,
         (R[:, 1, 2] + R[:, 2, 1]) / s_z, 0.25 * s_z],
        axis=1,
    )
    use_t = trace > 0
    use_x = ~use_t & (r00 >= r11) & (r00 >= r22)
    use_y = ~use_t & ~use_x & (r11 >= r22)
    use_z = ~(use_t | use_x | use_y)
    q[use_t] = cand_t[use_t]
    q[use_x] = cand_x[use_x]
    q[use_y] = cand_y[use_y]
    q[use_z] = cand_z[use_z]
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def quat_left_product_matrices(quats):
    """(V,4,4) matrices L(q) such that L(q) @ r = q (x) r (Hamilton)."""
    q = np.asarray(quats, dtype=np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    L = np.empty((q.shape[0], 4, 4))
    L[:, 0] = np.stack([w, -x, -y, -z], axis=1)
    L[:, 1] = np.stack([x, w, -z, y], axis=1)
    L[:, 2] = np.stack([y, z, w, -x], axis=1)
    L[:, 3] = np.stack([z, -y, x, w], axis=1)
    return L


def compose_quaternions_left_const(const_quats, rotations):
    """Tensor quaternion composition q_const (x) r with constant left
    factors, differentiable in r."""
    L = Tensor(quat_left_product_matrices(const_quats).astype(rotations.dtype))
    g = rotations.shape[0]
    return dg.matmul(L, rotations.reshape(g, 4, 1)).reshape(g, 4)

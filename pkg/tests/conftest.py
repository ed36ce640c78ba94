import numpy as np

from mmgs.gaussians import Camera, GaussianSet


def frontal_camera(cam_id=0, focal=64.0, width=64, height=64):
    K = np.array([[focal, 0, width / 2.0], [0, focal, height / 2.0], [0, 0, 1]])
    W = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
    return Camera(cam_id, K, W, width, height)


def random_gaussians(seed, count, dtype=np.float32, spread=0.5, scale_range=(0.01, 0.08)):
    """A cloud in front of a frontal camera with mid-range attributes
    (colors and opacities away from their clamp boundaries)."""
    rng = np.random.default_rng(seed)
    centers = np.column_stack(
        [
            rng.uniform(-spread, spread, count),
            rng.uniform(-spread, spread, count),
            rng.uniform(1.2, 3.0, count),
        ]
    )
    sh = np.zeros((count, 4, 3))
    sh[:, 0, :] = rng.normal(0.0, 0.3, (count, 3))
    sh[:, 1:, :] = rng.normal(0.0, 0.05, (count, 3, 3))
    return GaussianSet(
        centers=centers.astype(dtype),
        sh_coeffs=sh.astype(dtype),
        opacity_logit=rng.uniform(-2.0, 2.5, count).astype(dtype),
        rotation=rng.normal(size=(count, 4)).astype(dtype),
        log_scale=np.log(rng.uniform(*scale_range, (count, 3))).astype(dtype),
    )

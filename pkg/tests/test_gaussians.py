import numpy as np
import pytest

from mmgs import diffgrad as dg
from mmgs import gaussians as ga
from mmgs.diffgrad import Tensor


def rot_z(deg):
    a = np.deg2rad(deg)
    return np.array(
        [[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]]
    )


def quat_z(deg):
    half = np.deg2rad(deg) / 2.0
    return np.array([np.cos(half), 0.0, 0.0, np.sin(half)])


class TestCovariance:
    def test_identity_case(self):
        cov = ga.covariance_from_rotation_scale([1, 0, 0, 0], [1, 1, 1])
        np.testing.assert_allclose(cov, np.eye(3), atol=1e-12)

    def test_ninety_degree_z(self):
        # R diag(4,1,1) R^T for a 90 deg z-rotation lands on diag(1,4,1)
        cov = ga.covariance_from_rotation_scale(quat_z(90), [2, 1, 1])
        expected = rot_z(90) @ np.diag([4, 1, 1]) @ rot_z(90).T
        np.testing.assert_allclose(cov, expected, atol=1e-12)
        np.testing.assert_allclose(cov, np.diag([1, 4, 1]), atol=1e-12)

    def test_eigenvalues_are_squared_scales(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            s = rng.uniform(0.2, 3.0, size=3)
            cov = ga.covariance_from_rotation_scale(q, s)
            np.testing.assert_allclose(
                np.sort(np.linalg.eigvalsh(cov)), np.sort(s**2), rtol=1e-6
            )
            np.testing.assert_allclose(np.linalg.det(cov), np.prod(s) ** 2, rtol=1e-9)

    def test_quaternion_double_cover(self):
        rng = np.random.default_rng(12)
        q = rng.normal(size=4)
        s = rng.uniform(0.5, 2.0, size=3)
        np.testing.assert_allclose(
            ga.covariance_from_rotation_scale(q, s),
            ga.covariance_from_rotation_scale(-q, s),
            atol=1e-12,
        )

    def test_scale_quadratic_in_lambda(self):
        q = quat_z(33)
        s = np.array([0.5, 1.0, 2.0])
        a = ga.covariance_from_rotation_scale(q, s)
        b = ga.covariance_from_rotation_scale(q, 3.0 * s)
        np.testing.assert_allclose(b, 9.0 * a, rtol=1e-12)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError, match="zero quaternion"):
            ga.covariance_from_rotation_scale([0, 0, 0, 0], [1, 1, 1])

    def test_batched_tensor_matches_single(self):
        rng = np.random.default_rng(13)
        quats = rng.normal(size=(5, 4))
        scales = rng.uniform(0.3, 2.0, size=(5, 3))
        batch = ga.covariance_from_rotation_scale_t(
            Tensor(quats.astype(np.float64)), Tensor(scales.astype(np.float64))
        ).data
        for i in range(5):
            np.testing.assert_allclose(
                batch[i], ga.covariance_from_rotation_scale(quats[i], scales[i]),
                rtol=1e-10,
            )

    def test_batched_covariance_grad(self):
        rng = np.random.default_rng(14)
        scales = Tensor(rng.uniform(0.5, 1.5, size=(3, 3)).astype(np.float64))
        w = Tensor(rng.normal(size=(3, 3, 3)).astype(np.float64))

        def fn(q):
            cov = ga.covariance_from_rotation_scale_t(q.reshape(3, 4), scales)
            return (cov * w).sum()

        q0 = Tensor(rng.normal(size=12).astype(np.float64))
        assert dg.grad_check(fn, q0, step=1e-5) < 1e-6


class TestShColor:
    def test_degree0_inversion(self):
        c0 = np.array(
            [[0.5 / ga.SH_C0, 0.0, -0.5 / ga.SH_C0]]
        )
        rgb = ga.evaluate_sh_color(c0, [0.0, 0.0, 1.0])
        np.testing.assert_allclose(rgb, [1.0, 0.5, 0.0], atol=1e-7)

    def test_zero_coeffs_give_gray(self):
        rng = np.random.default_rng(15)
        for _ in range(5):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            rgb = ga.evaluate_sh_color(np.zeros((4, 3)), d)
            np.testing.assert_allclose(rgb, [0.5, 0.5, 0.5], atol=1e-12)

    def test_degree1_odd_parity(self):
        rng = np.random.default_rng(16)
        coeffs = rng.normal(size=(4, 3)) * 0.05
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        plus = ga.evaluate_sh_color(coeffs, d) - 0.5 - ga.SH_C0 * coeffs[0]
        minus = ga.evaluate_sh_color(coeffs, -d) - 0.5 - ga.SH_C0 * coeffs[0]
        np.testing.assert_allclose(plus, -minus, atol=1e-9)

    def test_band_count_validation(self):
        with pytest.raises(ValueError, match="degree"):
            ga.evaluate_sh_color(np.zeros((4, 3)), [0, 0, 1], degree=2)
        with pytest.raises(ValueError):
            ga.evaluate_sh_color(np.zeros((5, 3)), [0, 0, 1])

    def test_linear_in_coefficients_before_clamp(self):
        rng = np.random.default_rng(17)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        a = rng.normal(size=(4, 3)) * 0.02
        b = rng.normal(size=(4, 3)) * 0.02
        lhs = ga.evaluate_sh_color(a + b, d) - 0.5
        rhs = (ga.evaluate_sh_color(a, d) - 0.5) + (ga.evaluate_sh_color(b, d) - 0.5)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_tensor_batch_matches_single(self):
        rng = np.random.default_rng(18)
        coeffs = rng.normal(size=(6, 4, 3)) * 0.1
        dirs = rng.normal(size=(6, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        batch = ga.evaluate_sh_colors_t(
            Tensor(coeffs.astype(np.float64)), Tensor(dirs.astype(np.float64)), 1
        ).data
        for i in range(6):
            np.testing.assert_allclose(
                batch[i], ga.evaluate_sh_color(coeffs[i], dirs[i]), rtol=1e-8
            )


def make_camera(cam_id=0, f=100.0, size=64):
    K = np.array([[f, 0, size / 2], [0, f, size / 2], [0, 0, 1]])
    W = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
    return ga.Camera(cam_id, K, W, size, size)


class TestProjection:
    def test_axis_point_hits_principal_point(self):
        cam = make_camera()
        proj = ga.project_gaussian([0, 0, 1.0], np.eye(3) * 1e-4, cam)
        np.testing.assert_allclose(proj.mean2d, [32.0, 32.0], atol=1e-12)
        assert not proj.culled

    def test_pinhole_formula(self):
        cam = make_camera()
        proj = ga.project_gaussian([0.1, 0, 1.0], np.eye(3) * 1e-4, cam)
        np.testing.assert_allclose(proj.mean2d, [42.0, 32.0], atol=1e-9)

    def test_isotropic_on_axis_cov(self):
        cam = make_camera()
        sig2 = 0.05**2
        proj = ga.project_gaussian([0, 0, 2.0], np.eye(3) * sig2, cam)
        expected = (100.0**2 * sig2 / 4.0) * np.eye(2) + 0.3 * np.eye(2)
        np.testing.assert_allclose(proj.cov2d, expected, rtol=1e-12)

    def test_near_plane_cull_flag(self):
        cam = make_camera()
        proj = ga.project_gaussian([0, 0, 0.005], np.eye(3), cam)
        assert proj.culled

    def test_depth_ordering_preserved(self):
        cam = make_camera()
        pa = ga.project_gaussian([0.3, 0.1, 1.5], np.eye(3) * 1e-4, cam)
        pb = ga.project_gaussian([-0.2, 0.4, 2.5], np.eye(3) * 1e-4, cam)
        assert pa.depth < pb.depth

    def test_tensor_path_matches_single(self):
        rng = np.random.default_rng(19)
        cam = ga.Camera.look_at(0, [0.5, -2.0, 1.0], [0, 0, 0], [0, 0, 1], 80.0, 64, 48)
        pts = rng.normal(size=(7, 3)) * 0.3
        cam_pts = ga.camera_space_t(Tensor(pts.astype(np.float64)), cam)
        means = ga.project_points_t(cam_pts, cam).data
        for i in range(7):
            proj = ga.project_gaussian(pts[i], np.eye(3) * 1e-4, cam)
            np.testing.assert_allclose(means[i], proj.mean2d, rtol=1e-10)

    def test_tensor_covariance_projection_matches_single(self):
        rng = np.random.default_rng(20)
        cam = ga.Camera.look_at(0, [1.0, 2.0, -1.5], [0, 0, 0], [0, 0, 1], 90.0, 32, 32)
        pts = rng.normal(size=(5, 3)) * 0.2
        quats = rng.normal(size=(5, 4))
        scales = rng.uniform(0.05, 0.3, size=(5, 3))
        cam_pts = ga.camera_space_t(Tensor(pts.astype(np.float64)), cam)
        cov3d = ga.covariance_from_rotation_scale_t(
            Tensor(quats.astype(np.float64)),
            Tensor(scales.astype(np.float64)),
        )
        a, b, c = ga.project_covariance_t(cov3d, cam_pts, cam)
        for i in range(5):
            sig = ga.covariance_from_rotation_scale(quats[i], scales[i])
            proj = ga.project_gaussian(pts[i], sig, cam)
            np.testing.assert_allclose(
                [a.data[i], b.data[i], c.data[i]],
                [proj.cov2d[0, 0], proj.cov2d[0, 1], proj.cov2d[1, 1]],
                rtol=1e-9,
            )


class TestCameraValidation:
    def test_rejects_non_orthonormal_rotation(self):
        K = np.array([[50.0, 0, 16], [0, 50.0, 16], [0, 0, 1]])
        W = np.concatenate([np.eye(3) * 1.1, np.zeros((3, 1))], axis=1)
        with pytest.raises(ValueError, match="orthonormal"):
            ga.Camera(0, K, W, 32, 32)

    def test_rejects_negative_focal(self):
        K = np.array([[-50.0, 0, 16], [0, 50.0, 16], [0, 0, 1]])
        W = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
        with pytest.raises(ValueError, match="focal"):
            ga.Camera(0, K, W, 32, 32)

    def test_look_at_sees_target_at_center(self):
        cam = ga.Camera.look_at(0, [3, 2, 1], [0.2, -0.1, 0.4], [0, 0, 1], 60.0, 48, 48)
        proj = ga.project_gaussian([0.2, -0.1, 0.4], np.eye(3) * 1e-6, cam)
        np.testing.assert_allclose(proj.mean2d, [24.0, 24.0], atol=1e-9)


class TestGaussianSet:
    def test_shape_validation(self):
        with pytest.raises(ValueError, match="leading dim"):
            ga.GaussianSet(
                centers=np.zeros((3, 3)),
                sh_coeffs=np.zeros((2, 4, 3)),
                opacity_logit=np.zeros(3),
                rotation=np.tile([1.0, 0, 0, 0], (3, 1)),
                log_scale=np.zeros((3, 3)),
            )

    def test_activations_in_range(self):
        rng = np.random.default_rng(21)
        gs = ga.GaussianSet(
            centers=rng.normal(size=(4, 3)),
            sh_coeffs=rng.normal(size=(4, 4, 3)),
            opacity_logit=rng.normal(size=4) * 3,
            rotation=rng.normal(size=(4, 4)),
            log_scale=rng.normal(size=(4, 3)),
        )
        assert np.all(gs.opacity().data > 0) and np.all(gs.opacity().data < 1)
        assert np.all(gs.scale().data > 0)
        norms = np.linalg.norm(gs.unit_rotations().data, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)


def test_sh_batch_matches_single_higher_degrees():
    rng = np.random.default_rng(40)
    for degree in (0, 2, 3):
        bands = ga.sh_band_count(degree)
        coeffs = rng.normal(size=(4, bands, 3)) * 0.1
        dirs = rng.normal(size=(4, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        batch = ga.evaluate_sh_colors_t(
            Tensor(coeffs), Tensor(dirs), degree
        ).data
        for i in range(4):
            np.testing.assert_allclose(
                batch[i], ga.evaluate_sh_color(coeffs[i], dirs[i], degree),
                rtol=1e-7, atol=1e-9,
            )

import numpy as np
import pytest

from mmgs import deformation as df
from mmgs import diffgrad as dg
from mmgs.diffgrad import Tensor


def rot_z(deg):
    a = np.deg2rad(deg)
    return np.array(
        [[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]]
    )


def simple_template(v=5, k=3, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.1, 1.0, (v, k))
    w /= w.sum(axis=1, keepdims=True)
    return df.SkinnedTemplate(rng.normal(size=(v, 3)), w)


def identity_joints(k):
    return df.JointTransforms(
        np.broadcast_to(np.eye(3), (k, 3, 3)).copy(), np.zeros((k, 3))
    )


class TestTemplates:
    def test_rejects_bad_weight_rows(self):
        with pytest.raises(ValueError, match="row 1"):
            df.SkinnedTemplate(
                np.zeros((2, 3)), np.array([[0.5, 0.5], [0.6, 0.5]])
            )

    def test_rejects_negative_weights(self):
        with pytest.raises(ValueError, match="non-negative"):
            df.SkinnedTemplate(np.zeros((1, 3)), np.array([[1.5, -0.5]]))

    def test_joint_validation(self):
        with pytest.raises(ValueError, match="orthonormal"):
            df.JointTransforms(np.ones((1, 3, 3)), np.zeros((1, 3)))


class TestModulation:
    def test_fresh_modulator_outputs_exact_zero(self):
        rng = np.random.default_rng(1)
        mod = df.WeightModulator(rng, joint_count=4)
        m = mod(np.random.default_rng(2).normal(size=(9, 3)).astype(np.float32))
        assert np.all(m.data == 0.0)

    def test_modulation_bounded(self):
        rng = np.random.default_rng(3)
        mod = df.WeightModulator(rng, joint_count=4)
        # randomize the zero-initialized last layer
        mod.mlp.layers[-1].weight.data = rng.normal(
            0, 10.0, mod.mlp.layers[-1].weight.data.shape
        ).astype(np.float32)
        m = mod(rng.normal(size=(50, 3)).astype(np.float32))
        assert np.all(np.abs(m.data) <= df.MODULATION_BOUND)

    def test_pointwise_determinism(self):
        rng = np.random.default_rng(4)
        mod = df.WeightModulator(rng, joint_count=2)
        mod.mlp.layers[-1].weight.data += 0.3
        x = np.array([[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]], dtype=np.float32)
        m = mod(x).data
        np.testing.assert_array_equal(m[0], m[1])


class TestModulateWeights:
    def test_softmax_of_one_zero(self):
        w = df.modulate_weights(np.array([[1.0, 0.0]]), Tensor(np.zeros((1, 2))))
        np.testing.assert_allclose(w.data, [[0.7310586, 0.2689414]], rtol=1e-6)

    def test_equal_logits_symmetric(self):
        w = df.modulate_weights(np.array([[1.0, 0.0]]), Tensor(np.array([[-1.0, 0.0]])))
        np.testing.assert_allclose(w.data, [[0.5, 0.5]], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        base = rng.normal(size=(4, 3))
        m = rng.normal(size=(4, 3))
        a = df.modulate_weights(base, Tensor(m)).data
        b = df.modulate_weights(base, Tensor(m + 7.5)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rows_sum_to_one(self):
        # modulation magnitudes within the 5*tanh squash bound
        rng = np.random.default_rng(6)
        w = df.modulate_weights(
            rng.uniform(size=(30, 5)),
            Tensor(rng.uniform(-df.MODULATION_BOUND, df.MODULATION_BOUND, (30, 5))),
        )
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(w.data > 0) and np.all(w.data < 1)


class TestLbsCenters:
    def test_identity_pose_bit_exact(self):
        tpl = simple_template(v=20, k=4, seed=7)
        joints = identity_joints(4)
        w = Tensor(tpl.skinning_weights.astype(np.float32))
        out = df.lbs_pose_centers(tpl, joints, w)
        assert np.array_equal(out.data, tpl.canonical_centers.astype(np.float32))

    def test_single_joint_translation(self):
        tpl = df.SkinnedTemplate(np.array([[1.0, 2.0, 3.0]]), np.array([[1.0]]))
        joints = df.JointTransforms(np.eye(3)[None], np.array([[0.0, 0.0, 1.0]]))
        out = df.lbs_pose_centers(tpl, joints, Tensor(np.array([[1.0]])))
        np.testing.assert_allclose(out.data, [[1.0, 2.0, 4.0]], atol=1e-12)

    def test_two_joint_half_weight_hand_value(self):
        tpl = df.SkinnedTemplate(np.zeros((1, 3)), np.array([[0.5, 0.5]]))
        joints = df.JointTransforms(
            np.broadcast_to(np.eye(3), (2, 3, 3)).copy(),
            np.array([[1.0, 0, 0], [0, 1.0, 0]]),
        )
        out = df.lbs_pose_centers(tpl, joints, Tensor(np.array([[0.5, 0.5]])))
        np.testing.assert_array_equal(out.data, np.array([[0.5, 0.5, 0.0]]))

    def test_blend_offsets_added(self):
        tpl = df.SkinnedTemplate(
            np.zeros((2, 3)), np.ones((2, 1)), blend_offsets=np.full((2, 3), 0.25)
        )
        out = df.lbs_pose_centers(tpl, identity_joints(1), Tensor(np.ones((2, 1))))
        np.testing.assert_allclose(out.data, 0.25, atol=1e-7)

    def test_rigid_equivariance(self):
        tpl = simple_template(v=12, k=3, seed=8)
        rng = np.random.default_rng(9)
        rots = np.stack([rot_z(a) for a in rng.uniform(0, 90, 3)])
        joints = df.JointTransforms(rots, rng.normal(size=(3, 3)))
        w = Tensor(tpl.skinning_weights)
        base = df.lbs_pose_centers(tpl, joints, w).data
        Rg, tg = rot_z(37.0), np.array([0.3, -0.2, 1.4])
        moved = df.JointTransforms(
            np.einsum("ij,kjl->kil", Rg, rots),
            joints.translations @ Rg.T + tg,
        )
        out = df.lbs_pose_centers(tpl, moved, w).data
        np.testing.assert_allclose(out, base @ Rg.T + tg, atol=1e-9)

    def test_grad_through_weights_and_modulator(self):
        tpl = simple_template(v=6, k=3, seed=10)
        joints = df.JointTransforms(
            np.stack([rot_z(10), rot_z(40), rot_z(-25)]),
            np.random.default_rng(11).normal(size=(3, 3)),
        )
        probe = np.random.default_rng(12).normal(size=(6, 3))

        def fn(m_flat):
            w = df.modulate_weights(tpl.skinning_weights, m_flat.reshape(6, 3))
            posed = df.lbs_pose_centers(tpl, joints, w)
            return (posed * Tensor(probe)).sum()

        start = Tensor(np.random.default_rng(13).normal(size=18) * 0.5)
        assert dg.grad_check(fn, start, step=1e-5) < 1e-6


class TestLbsCovariance:
    def test_single_identity_joint(self):
        cov = np.diag([4.0, 1.0, 1.0])[None]
        posed, blend = df.lbs_pose_covariance(
            cov, identity_joints(1), Tensor(np.ones((1, 1)))
        )
        np.testing.assert_allclose(posed.data[0], cov[0], atol=1e-12)
        np.testing.assert_allclose(blend.data[0], np.eye(3), atol=1e-12)

    def test_conjugation_by_rotation(self):
        cov = np.diag([4.0, 1.0, 1.0])[None]
        joints = df.JointTransforms(rot_z(90)[None], np.zeros((1, 3)))
        posed, _ = df.lbs_pose_covariance(cov, joints, Tensor(np.ones((1, 1))))
        np.testing.assert_allclose(posed.data[0], np.diag([1.0, 4.0, 1.0]), atol=1e-9)

    def test_degenerate_blend(self):
        cov = np.diag([4.0, 1.0, 9.0])[None]
        joints = df.JointTransforms(
            np.stack([np.eye(3), rot_z(180)]), np.zeros((2, 3))
        )
        posed, blend = df.lbs_pose_covariance(
            cov, joints, Tensor(np.array([[0.5, 0.5]]))
        )
        np.testing.assert_allclose(blend.data[0], np.diag([0.0, 0.0, 1.0]), atol=1e-9)
        np.testing.assert_allclose(posed.data[0], np.diag([0.0, 0.0, 9.0]), atol=1e-9)


class TestRigidPose:
    def test_identity(self):
        pts = np.random.default_rng(14).normal(size=(6, 3))
        pose = df.RigidPose(np.eye(3), np.zeros(3))
        np.testing.assert_array_equal(df.pose_rigid_object(pts, pose), pts)

    def test_pure_translation(self):
        pts = np.random.default_rng(15).normal(size=(4, 3))
        pose = df.RigidPose(np.eye(3), [1.0, 2.0, 3.0])
        np.testing.assert_allclose(
            df.pose_rigid_object(pts, pose), pts + [1, 2, 3], atol=1e-12
        )

    def test_rotation_hand_value(self):
        pose = df.RigidPose(rot_z(90), np.zeros(3))
        out = df.pose_rigid_object(np.array([[1.0, 0.0, 0.0]]), pose)
        np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]], atol=1e-12)

    def test_distances_preserved(self):
        rng = np.random.default_rng(16)
        pts = rng.normal(size=(10, 3))
        pose = df.RigidPose(rot_z(33.0) @ np.diag([1, 1, 1]), rng.normal(size=3))
        out = df.pose_rigid_object(pts, pose)
        d_in = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        d_out = np.linalg.norm(out[:, None] - out[None, :], axis=2)
        np.testing.assert_allclose(d_out, d_in, atol=1e-6)

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError, match="orthonormal"):
            df.RigidPose(np.eye(3) * 1.01, np.zeros(3))


class TestInitialization:
    def test_half_opacity_everywhere(self):
        gs = df.initialize_gaussian_attributes(np.random.default_rng(17).normal(size=(8, 3)))
        np.testing.assert_allclose(gs.opacity().data, 0.5, atol=1e-7)

    def test_unit_grid_scale(self):
        xs, ys = np.meshgrid(np.arange(4.0), np.arange(4.0))
        pts = np.stack([xs.ravel(), ys.ravel(), np.zeros(16)], axis=1)
        gs = df.initialize_gaussian_attributes(pts)
        np.testing.assert_allclose(np.exp(gs.log_scale.data), 0.5, rtol=1e-6)

    def test_single_vertex_fallback(self):
        gs = df.initialize_gaussian_attributes(np.zeros((1, 3)))
        np.testing.assert_allclose(np.exp(gs.log_scale.data), 0.01, rtol=1e-6)

    def test_zero_sh_renders_gray(self):
        gs = df.initialize_gaussian_attributes(np.zeros((2, 3)) + [[0, 0, 2], [0.1, 0, 2]])
        from mmgs.gaussians import evaluate_sh_color

        rgb = evaluate_sh_color(gs.sh_coeffs.data[0], [0, 0, 1])
        np.testing.assert_allclose(rgb, 0.5, atol=1e-7)


class TestPoseHuman:
    def make(self, seed=18, v=10, k=3):
        tpl = simple_template(v=v, k=k, seed=seed)
        canonical = df.initialize_gaussian_attributes(tpl.canonical_centers)
        rng = np.random.default_rng(seed + 1)
        rots = np.stack([rot_z(a) for a in rng.uniform(-60, 60, k)])
        joints = df.JointTransforms(rots, rng.normal(size=(k, 3)) * 0.3)
        return tpl, canonical, joints

    def test_identity_pose_passthrough(self):
        tpl, canonical, _ = self.make()
        joints = identity_joints(3)
        posed = df.pose_human(tpl, joints, canonical)
        assert np.array_equal(posed.centers.data, canonical.centers.data)
        assert np.array_equal(posed.rotation.data, canonical.rotation.data)

    def test_raw_blend_covariance_matches_eq3(self):
        tpl, canonical, joints = self.make()
        posed = df.pose_human(tpl, joints, canonical)
        w = Tensor(tpl.skinning_weights.astype(np.float32))
        canonical_cov = canonical.covariances()
        expected, _ = df.lbs_pose_covariance(canonical_cov, joints, w)
        np.testing.assert_allclose(
            posed.covariances().data, expected.data, atol=1e-5
        )

    def test_polar_flag_gives_orthonormal_only(self):
        tpl, canonical, joints = self.make()
        posed = df.pose_human(tpl, joints, canonical, use_raw_blend_covariance=False)
        assert posed.cov_transform is None
        # stored quaternions are the nearest rotations of the blend
        w = Tensor(tpl.skinning_weights.astype(np.float32))
        blend = df.lbs_blend_rotations(identity_joints(3), w)
        assert posed.rotation.shape == (10, 4)

import numpy as np
import pytest

from splat4d import autodiff as ad
from splat4d import gaussians as gs


def make_cloud(n=4, sh_degree=1, seed=0, requires_grad=False):
    rng = np.random.default_rng(seed)
    k = (sh_degree + 1) ** 2
    return gs.GaussianCloud(
        positions=ad.Tensor(rng.uniform(-1, 1, (n, 3)), requires_grad=requires_grad),
        log_scales=ad.Tensor(rng.uniform(-2, 0, (n, 3)), requires_grad=requires_grad),
        rotations=ad.Tensor(rng.normal(size=(n, 4)), requires_grad=requires_grad),
        opacity_logits=ad.Tensor(rng.uniform(-1, 3, (n, 1)), requires_grad=requires_grad),
        sh_coeffs=ad.Tensor(rng.uniform(-0.5, 0.5, (n, k, 3)), requires_grad=requires_grad),
        sh_degree=sh_degree,
    )


class TestActivate:
    def test_zero_log_scale_gives_unit_scale(self):
        cloud = make_cloud()
        cloud.log_scales.data[:] = 0.0
        s, _, _ = gs.activate(cloud)
        np.testing.assert_allclose(s.data, 1.0)

    def test_zero_logit_gives_half_opacity(self):
        cloud = make_cloud()
        cloud.opacity_logits.data[:] = 0.0
        _, o, _ = gs.activate(cloud)
        np.testing.assert_allclose(o.data, 0.5)

    def test_quaternion_normalization(self):
        cloud = make_cloud(n=1)
        cloud.rotations.data[:] = [[2.0, 0.0, 0.0, 0.0]]
        _, _, q = gs.activate(cloud)
        np.testing.assert_allclose(q.data, [[1.0, 0.0, 0.0, 0.0]])

    def test_degenerate_quaternion_rejected(self):
        cloud = make_cloud(n=2)
        cloud.rotations.data[1] = 0.0
        with pytest.raises(ValueError, match="degenerate"):
            gs.activate(cloud)

    def test_roundtrip_within_1e10(self):
        cloud = make_cloud(n=8, seed=3)
        s, o, q = gs.activate(cloud)
        log_s, logits, qn = gs.inverse_activate(s.data, o.data, q.data)
        np.testing.assert_allclose(log_s, cloud.log_scales.data, atol=1e-10)
        np.testing.assert_allclose(logits, cloud.opacity_logits.data, atol=1e-10)
        raw_unit = cloud.rotations.data / np.linalg.norm(
            cloud.rotations.data, axis=1, keepdims=True
        )
        np.testing.assert_allclose(qn, raw_unit, atol=1e-10)


class TestQuatToRotmat:
    def test_identity_quaternion(self):
        r = gs.quat_to_rotmat(ad.Tensor([[1.0, 0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(r.data[0], np.eye(3), atol=1e-15)

    def test_quarter_turn_about_z(self):
        h = np.sqrt(0.5)
        r = gs.quat_to_rotmat(ad.Tensor([[h, 0.0, 0.0, h]])).data[0]
        np.testing.assert_allclose(r @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)

    def test_non_unit_rejected(self):
        with pytest.raises(ValueError, match="unit"):
            gs.quat_to_rotmat(ad.Tensor([[2.0, 0.0, 0.0, 0.0]]))

    @pytest.mark.parametrize("seed", range(6))
    def test_orthonormality_property_sweep(self, seed):
        rng = np.random.default_rng(seed)
        q = rng.normal(size=(16, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        r = gs.quat_to_rotmat(ad.Tensor(q)).data
        for m in r:
            np.testing.assert_allclose(m.T @ m, np.eye(3), atol=1e-12)
            assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-12)

    def test_grad_matches_finite_diff(self):
        rng = np.random.default_rng(11)
        q = rng.normal(size=(3, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        w = rng.normal(size=(3, 3, 3))

        def f(t):
            tq = ad.div(t, ad.broadcast_to(
                ad.sqrt(ad.tsum(ad.mul(t, t), axis=1, keepdims=True)), t.shape))
            return ad.tsum(ad.mul(gs.quat_to_rotmat(tq), ad.Tensor(w)))

        t = ad.Tensor(q, requires_grad=True)
        ad.backward(f(t))
        want = ad.finite_diff(f, ad.Tensor(q), h=1e-6)
        assert np.linalg.norm(t.grad - want) / np.linalg.norm(want) < 1e-6


class TestCovariance3d:
    def test_axis_aligned_diag(self):
        s = ad.Tensor([[1.0, 2.0, 3.0]])
        r = ad.Tensor(np.eye(3)[None])
        cov = gs.covariance3d(s, r).data[0]
        np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 9.0]), atol=1e-14)

    def test_isotropic_invariant_to_rotation(self):
        rng = np.random.default_rng(2)
        q = rng.normal(size=(1, 4))
        q /= np.linalg.norm(q)
        r = gs.quat_to_rotmat(ad.Tensor(q))
        cov = gs.covariance3d(ad.Tensor([[0.7, 0.7, 0.7]]), r).data[0]
        np.testing.assert_allclose(cov, 0.49 * np.eye(3), atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_symmetry_property_sweep(self, seed):
        rng = np.random.default_rng(seed)
        q = rng.normal(size=(8, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        r = gs.quat_to_rotmat(ad.Tensor(q))
        s = ad.Tensor(rng.uniform(0.1, 2.0, (8, 3)))
        cov = gs.covariance3d(s, r).data
        np.testing.assert_allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-12)
        # Positive definite: all eigenvalues > 0.
        for m in cov:
            assert np.min(np.linalg.eigvalsh(m)) > 0

    def test_quaternion_sign_flip_invariance(self):
        rng = np.random.default_rng(9)
        q = rng.normal(size=(5, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        s = ad.Tensor(rng.uniform(0.2, 1.5, (5, 3)))
        cov_pos = gs.covariance3d(s, gs.quat_to_rotmat(ad.Tensor(q))).data
        cov_neg = gs.covariance3d(s, gs.quat_to_rotmat(ad.Tensor(-q))).data
        np.testing.assert_allclose(cov_pos, cov_neg, atol=1e-13)

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            gs.covariance3d(ad.Tensor([[1.0, 0.0, 1.0]]), ad.Tensor(np.eye(3)[None]))


class TestShToRgb:
    def test_degree0_constant_over_directions(self):
        coeffs = ad.Tensor([[[0.4, -0.2, 0.1]]])  # (1, 1, 3)
        for d in ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]):
            rgb = gs.sh_to_rgb(coeffs, ad.Tensor([d]), degree=0).data[0]
            np.testing.assert_allclose(
                rgb, 0.5 + gs.SH_C0 * np.array([0.4, -0.2, 0.1]), atol=1e-14
            )

    def test_all_zero_coeffs_give_mid_gray(self):
        coeffs = ad.zeros((2, 4, 3))
        dirs = ad.Tensor([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        rgb = gs.sh_to_rgb(coeffs, dirs, degree=1).data
        np.testing.assert_allclose(rgb, 0.5)

    def test_degree1_z_band_sign_flip(self):
        coeffs = np.zeros((1, 4, 3))
        coeffs[0, 2, :] = 0.3  # z band of the degree-1 shell
        up = gs.sh_to_rgb(ad.Tensor(coeffs), ad.Tensor([[0.0, 0.0, 1.0]]), degree=1).data[0]
        dn = gs.sh_to_rgb(ad.Tensor(coeffs), ad.Tensor([[0.0, 0.0, -1.0]]), degree=1).data[0]
        np.testing.assert_allclose(up - 0.5, -(dn - 0.5), atol=1e-14)
        np.testing.assert_allclose(up - 0.5, gs.SH_C1 * 0.3, atol=1e-14)

    def test_band_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="bands"):
            gs.sh_to_rgb(ad.zeros((1, 4, 3)), ad.Tensor([[0.0, 0.0, 1.0]]), degree=0)

    def test_matches_numpy_basis(self):
        rng = np.random.default_rng(4)
        dirs = rng.normal(size=(6, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        coeffs = rng.uniform(-1, 1, (6, 9, 3))
        got = gs.sh_to_rgb(ad.Tensor(coeffs), ad.Tensor(dirs), degree=2).data
        basis = gs.sh_basis(dirs, 2)
        want = 0.5 + np.einsum("nk,nkc->nc", basis, coeffs)
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestCloudIO:
    def test_roundtrip_bytes(self, tmp_path):
        cloud = make_cloud(n=5, sh_degree=2, seed=1)
        p = tmp_path / "cloud.g4dc"
        gs.save_cloud(cloud, p)
        again = gs.load_cloud(p)
        assert again.sh_degree == 2
        for name, t in cloud.parameters().items():
            np.testing.assert_array_equal(t.data, getattr(again, name).data)
        # Re-serialization is byte-identical.
        p2 = tmp_path / "cloud2.g4dc"
        gs.save_cloud(again, p2)
        assert p.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"XXXX" + b"\0" * 32)
        with pytest.raises(ValueError, match="magic"):
            gs.load_cloud(p)


class TestLookAt:
    def test_rotation_is_proper(self):
        cam = gs.look_at_camera(
            (3.0, 1.0, 2.0), (0.0, 0.0, 0.0),
            fx=50.0, fy=50.0, cx=16.0, cy=16.0, width=32, height=32,
        )
        r = cam.rotation
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)

    def test_target_projects_to_principal_point(self):
        cam = gs.look_at_camera(
            (4.0, 0.0, 0.0), (0.0, 0.0, 0.0),
            fx=60.0, fy=60.0, cx=31.5, cy=31.5, width=64, height=64,
        )
        p_cam = cam.rotation @ np.zeros(3) + cam.translation
        assert p_cam[2] == pytest.approx(4.0)
        u = cam.fx * p_cam[0] / p_cam[2] + cam.cx
        v = cam.fy * p_cam[1] / p_cam[2] + cam.cy
        assert (u, v) == (pytest.approx(31.5), pytest.approx(31.5))

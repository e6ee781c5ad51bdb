import numpy as np
import pytest

from splat4d import autodiff as ad
from splat4d import gaussians as gs
from splat4d import renderer as rn


def frontal_camera(size=16, fx=None, eye=(0.0, 0.0, -3.0)):
    fx = fx or size * 1.2
    c = (size - 1) / 2.0
    return gs.look_at_camera(
        eye, (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0),
        fx=fx, fy=fx, cx=c, cy=c, width=size, height=size,
    )


def scene_cloud(n=8, sh_degree=1, seed=0, spread=0.8, requires_grad=False):
    rng = np.random.default_rng(seed)
    k = (sh_degree + 1) ** 2
    pos = rng.uniform(-spread, spread, (n, 3))
    pos[:, 2] = np.linspace(-0.6, 0.6, n)  # distinct depths, no sort flips
    return gs.GaussianCloud(
        positions=ad.Tensor(pos, requires_grad=requires_grad),
        log_scales=ad.Tensor(rng.uniform(-2.2, -1.4, (n, 3)), requires_grad=requires_grad),
        rotations=ad.Tensor(rng.normal(size=(n, 4)), requires_grad=requires_grad),
        opacity_logits=ad.Tensor(rng.uniform(0.0, 1.5, (n, 1)), requires_grad=requires_grad),
        sh_coeffs=ad.Tensor(rng.uniform(-0.4, 0.4, (n, k, 3)), requires_grad=requires_grad),
        sh_degree=sh_degree,
    )


SMOOTH = rn.RenderSettings(skip_threshold=0.0, truncation_sigma=1e3)


class TestProjectPoint:
    def test_optical_axis_hits_principal_point(self):
        cam = gs.Camera(fx=100, fy=100, cx=50, cy=50, width=100, height=100)
        sp = rn.project_point(np.array([0.0, 0.0, 1.0]), 0.01 * np.eye(3), cam)
        np.testing.assert_allclose(sp.mean2d, [50.0, 50.0])
        assert sp.depth == pytest.approx(1.0)

    def test_isotropic_covariance_on_axis(self):
        cam = gs.Camera(fx=100, fy=100, cx=50, cy=50, width=100, height=100)
        sigma, z = 0.05, 2.0
        sp = rn.project_point(np.array([0.0, 0.0, z]), sigma**2 * np.eye(3), cam)
        want = (cam.fx * sigma / z) ** 2 * np.eye(2) + rn.RenderSettings().dilation * np.eye(2)
        np.testing.assert_allclose(sp.cov2d, want, atol=1e-12)

    def test_doubling_depth_halves_extent(self):
        cam = gs.Camera(fx=100, fy=100, cx=50, cy=50, width=100, height=100)
        nodil = rn.RenderSettings(dilation=0.0)
        near = rn.project_point(np.array([0.0, 0.0, 1.0]), 0.01 * np.eye(3), cam, nodil)
        far = rn.project_point(np.array([0.0, 0.0, 2.0]), 0.01 * np.eye(3), cam, nodil)
        np.testing.assert_allclose(near.cov2d, 4.0 * far.cov2d, atol=1e-12)

    def test_behind_camera_is_culled(self):
        cam = gs.Camera(fx=100, fy=100, cx=50, cy=50, width=100, height=100)
        assert rn.project_point(np.array([0.0, 0.0, -1.0]), np.eye(3), cam) is None


class TestCompositePixel:
    def test_no_splats_gives_background(self):
        out = rn.composite_pixel([], (5.0, 5.0), (0.2, 0.4, 0.6))
        np.testing.assert_allclose(out, [0.2, 0.4, 0.6])

    def test_single_centered_splat(self):
        s = rn.Splat2D(
            mean2d=np.array([5.0, 5.0]), cov2d=4.0 * np.eye(2), depth=1.0,
            color=np.array([0.8, 0.0, 0.0]), opacity=0.99,
        )
        out = rn.composite_pixel([s], (5.0, 5.0), (0.0, 0.0, 0.0))
        np.testing.assert_allclose(out, [0.99 * 0.8, 0.0, 0.0], atol=1e-12)

    def test_two_centered_near_opaque_splats(self):
        mk = lambda depth, color: rn.Splat2D(
            mean2d=np.array([5.0, 5.0]), cov2d=4.0 * np.eye(2), depth=depth,
            color=np.array(color), opacity=0.99,
        )
        front, back = mk(1.0, [1.0, 0.0, 0.0]), mk(2.0, [0.0, 1.0, 0.0])
        out = rn.composite_pixel([front, back], (5.0, 5.0), (0.0, 0.0, 0.0))
        # Hand compositing: front contributes 0.99, back 0.99 * (1 - 0.99).
        np.testing.assert_allclose(out, [0.99, 0.99 * 0.01, 0.0], atol=1e-12)

    def test_non_psd_rejected(self):
        s = rn.Splat2D(
            mean2d=np.zeros(2), cov2d=np.array([[1.0, 2.0], [2.0, 1.0]]), depth=1.0,
            color=np.zeros(3), opacity=0.5,
        )
        with pytest.raises(ValueError, match="non-PSD"):
            rn.composite_pixel([s], (0.0, 0.0), (0.0, 0.0, 0.0))


class TestRender:
    def test_empty_cloud_is_background(self):
        cloud = scene_cloud(n=3)
        empty = gs.GaussianCloud(
            positions=ad.zeros((0, 3)), log_scales=ad.zeros((0, 3)),
            rotations=ad.zeros((0, 4)), opacity_logits=ad.zeros((0, 1)),
            sh_coeffs=ad.zeros((0, 4, 3)), sh_degree=1,
        )
        img = rn.render(empty, frontal_camera(8), (0.1, 0.2, 0.3))
        np.testing.assert_allclose(img.rgb.data, np.broadcast_to([0.1, 0.2, 0.3], (8, 8, 3)))

    def test_all_behind_camera_is_background(self):
        cloud = scene_cloud(n=4)
        cloud.positions.data[:, 2] = -10.0  # behind the eye at z=-3
        img = rn.render(cloud, frontal_camera(8), (1.0, 1.0, 1.0))
        np.testing.assert_allclose(img.rgb.data, 1.0)

    def test_permutation_invariance_bit_exact(self):
        cloud = scene_cloud(n=8, seed=3)
        cam = frontal_camera(16)
        img = rn.render(cloud, cam, (0.0, 0.0, 0.0))
        perm = np.random.default_rng(0).permutation(8)
        shuffled = gs.GaussianCloud(
            positions=ad.Tensor(cloud.positions.data[perm]),
            log_scales=ad.Tensor(cloud.log_scales.data[perm]),
            rotations=ad.Tensor(cloud.rotations.data[perm]),
            opacity_logits=ad.Tensor(cloud.opacity_logits.data[perm]),
            sh_coeffs=ad.Tensor(cloud.sh_coeffs.data[perm]),
            sh_degree=1,
        )
        img2 = rn.render(shuffled, cam, (0.0, 0.0, 0.0))
        assert img.rgb.data.tobytes() == img2.rgb.data.tobytes()

    def test_matches_scalar_reference(self):
        cloud = scene_cloud(n=6, seed=5)
        cam = frontal_camera(12)
        img = rn.render(cloud, cam, (0.15, 0.1, 0.05))
        for (row, col) in [(0, 0), (5, 6), (6, 5), (11, 11), (3, 9)]:
            want = rn.reference_render_pixel(
                cloud, cam, (float(col), float(row)), (0.15, 0.1, 0.05)
            )
            np.testing.assert_allclose(img.rgb.data[row, col], want, atol=1e-10)

    def test_occlusion_monotonicity(self):
        # Front red splat over a back green splat; raising front opacity must
        # not increase the green contribution anywhere.
        def build(front_logit):
            k = 4
            dc = lambda v: (v - 0.5) / gs.SH_C0  # DC coeff for a target color value
            sh = np.zeros((2, k, 3))
            sh[0, 0] = [dc(1.0), dc(0.0), dc(0.0)]  # front: pure red
            sh[1, 0] = [dc(0.0), dc(1.0), dc(0.0)]  # back: pure green
            return gs.GaussianCloud(
                positions=ad.Tensor([[0.0, 0.0, -0.5], [0.0, 0.0, 0.5]]),
                log_scales=ad.Tensor(np.full((2, 3), -1.2)),
                rotations=ad.Tensor([[1.0, 0, 0, 0], [1.0, 0, 0, 0]]),
                opacity_logits=ad.Tensor([[front_logit], [2.0]]),
                sh_coeffs=ad.Tensor(sh),
                sh_degree=1,
            )

        cam = frontal_camera(16)
        lo = rn.render(build(0.0), cam).rgb.data[..., 1]
        hi = rn.render(build(2.5), cam).rgb.data[..., 1]
        assert np.all(hi <= lo + 1e-12)

    def test_energy_bound_convex_hull(self):
        cloud = scene_cloud(n=8, seed=6)
        cam = frontal_camera(16)
        bg = np.array([0.3, 0.6, 0.2])
        img = rn.render(cloud, cam, bg).rgb.data
        scales, opac, quats = gs.activate(cloud)
        center = cam.center
        dirs = cloud.positions.data - center
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        basis = gs.sh_basis(dirs, 1)
        colors = np.clip(0.5 + np.einsum("nk,nkc->nc", basis, cloud.sh_coeffs.data), 0, 1)
        lo = np.minimum(colors.min(axis=0), bg) - 1e-12
        hi = np.maximum(colors.max(axis=0), bg) + 1e-12
        assert np.all(img >= lo) and np.all(img <= hi)

    def test_depth_and_alpha_diagnostics(self):
        cloud = scene_cloud(n=4, seed=8)
        img = rn.render(cloud, frontal_camera(12))
        assert np.all(img.alpha.data >= 0) and np.all(img.alpha.data <= 1)
        covered = img.alpha.data > 0.5
        if covered.any():
            assert np.all(img.depth.data[covered] > 0)


class TestRenderGradients:
    @pytest.mark.parametrize("field", [
        "positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs",
    ])
    def test_grad_matches_finite_diff(self, field):
        cloud = scene_cloud(n=8, seed=2, requires_grad=True)
        cam = frontal_camera(16)
        target = np.random.default_rng(1).uniform(0.1, 0.9, (16, 16, 3))

        def loss_for(cloud_obj):
            img = rn.render(cloud_obj, cam, (0.0, 0.0, 0.0), SMOOTH)
            return ad.tmean(ad.absolute(ad.sub(img.rgb, ad.Tensor(target))))

        loss = loss_for(cloud)
        ad.backward(loss)
        got = cloud.parameters()[field].grad.copy()

        base = cloud.parameters()[field]

        def fd_loss(t):
            params = {k: v.detach() for k, v in cloud.parameters().items()}
            params[field] = t
            c2 = gs.GaussianCloud(sh_degree=cloud.sh_degree, **params)
            return loss_for(c2)

        want = ad.finite_diff(fd_loss, ad.Tensor(base.data.copy()), h=1e-5)
        rel = np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-12)
        assert rel <= 1e-3, f"{field}: rel grad err {rel:.2e}"

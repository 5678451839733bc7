"""Renderer tests: projection, oracle equivalence, analytic gradients."""

import numpy as np
import pytest

from splatgen.camera import Camera
from splatgen.gaussians import Gaussian, GaussianCloud, rgb_to_sh0
from splatgen.render import (
    oracle_render,
    project_gaussian,
    render,
    render_with_gradients,
)
from splatgen.synthetic import generate_synthetic_scene
from splatgen import sh


def identity_camera(size=32, f=32.0):
    return Camera(fx=f, fy=f, cx=(size - 1) / 2, cy=(size - 1) / 2, width=size, height=size,
                  rotation=np.array([1.0, 0, 0, 0]), translation=np.zeros(3))


def single_gaussian(mean, scale=0.08, logit=2.0, color=(1.0, 1.0, 1.0), deg=0):
    sh_c = np.zeros(((deg + 1) ** 2, 3))
    sh_c[0] = rgb_to_sh0(np.asarray(color, dtype=float))
    return Gaussian(np.asarray(mean, dtype=float), np.array([1.0, 0, 0, 0]),
                    np.full(3, np.log(scale)), logit, sh_c)


def cloud_of(*gaussians):
    return GaussianCloud(
        np.array([g.mean for g in gaussians]),
        np.array([g.rotation for g in gaussians]),
        np.array([g.log_scale for g in gaussians]),
        np.array([g.logit_opacity for g in gaussians]),
        np.array([g.sh_coeffs for g in gaussians]),
    )


class TestProjection:
    def test_on_axis_projects_to_principal_point(self):
        cam = identity_camera()
        p = project_gaussian(single_gaussian([0.0, 0.0, 2.0]), cam)
        np.testing.assert_allclose(p.mean2d, [cam.cx, cam.cy], atol=1e-12)
        assert p.view_depth == pytest.approx(2.0)

    def test_isotropic_cov2d_matches_focal_scaling(self):
        cam = identity_camera(f=64.0)
        s, d = 0.02, 2.5
        p = project_gaussian(single_gaussian([0.0, 0.0, d], scale=s), cam)
        expected = (64.0 * s / d) ** 2
        assert p.cov2d[0, 0] - 0.3 == pytest.approx(expected, rel=0.01)
        assert p.cov2d[1, 1] - 0.3 == pytest.approx(expected, rel=0.01)
        assert abs(p.cov2d[0, 1]) < 1e-9

    def test_cov2d_matches_finite_difference_jacobian(self):
        # Propagate the world covariance through a numerically
        # differentiated pixel projection and compare.
        cam = identity_camera(f=48.0)
        rng = np.random.default_rng(3)
        from splatgen import quaternion as quat
        from splatgen.gaussians import covariance_of

        for _ in range(5):
            mean = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(1.5, 3.0)])
            g = Gaussian(mean, quat.random_unit(rng), rng.uniform(-3.5, -2.5, 3), 1.0, np.zeros((1, 3)))
            h = 1e-6
            jac = np.zeros((2, 3))
            for j in range(3):
                e = np.zeros(3)
                e[j] = h
                pp, _ = cam.project(mean + e)
                pm, _ = cam.project(mean - e)
                jac[:, j] = (pp - pm) / (2 * h)
            expected = jac @ covariance_of(g) @ jac.T + 0.3 * np.eye(2)
            p = project_gaussian(g, cam)
            np.testing.assert_allclose(p.cov2d, expected, rtol=1e-4, atol=1e-6)

    def test_behind_camera_is_culled(self):
        cam = identity_camera()
        assert project_gaussian(single_gaussian([0.0, 0.0, -2.0]), cam) is None

    def test_far_off_image_is_culled(self):
        cam = identity_camera()
        assert project_gaussian(single_gaussian([50.0, 0.0, 2.0], scale=0.01), cam) is None


class TestRender:
    def test_single_opaque_gaussian_center_pixel(self):
        cam = Camera(fx=32.0, fy=32.0, cx=16.0, cy=16.0, width=32, height=32,
                     rotation=np.array([1.0, 0, 0, 0]), translation=np.zeros(3))
        g = single_gaussian([0.0, 0.0, 2.0], scale=0.2, logit=4.0)
        frame = render(cloud_of(g), cam)
        assert frame.color[16, 16, 0] >= 0.99 * g.opacity
        assert frame.depth[16, 16] == pytest.approx(2.0, abs=1e-6)

    def test_empty_region_is_background(self):
        cam = identity_camera()
        frame = render(cloud_of(single_gaussian([0.0, 0.0, 2.0], scale=0.01)), cam,
                       background=(0.2, 0.3, 0.4))
        corner = frame.color[0, 0]
        np.testing.assert_allclose(corner, [0.2, 0.3, 0.4], atol=1e-12)
        assert frame.depth[0, 0] == 0.0
        assert frame.alpha[0, 0] == 0.0

    def test_matches_oracle_on_random_scene(self):
        scene = generate_synthetic_scene(seed=12, n_gaussians=100, n_cameras=1, layout="orbit")
        a = render(scene.cloud, scene.cameras[0])
        b = oracle_render(scene.cloud, scene.cameras[0])
        assert np.abs(a.color - b.color).max() <= 1e-5
        assert np.abs(a.depth - b.depth).max() <= 1e-5
        assert np.abs(a.alpha - b.alpha).max() <= 1e-5

    def test_deterministic(self):
        scene = generate_synthetic_scene(seed=1, n_gaussians=40, n_cameras=1, layout="walkthrough")
        a = render(scene.cloud, scene.cameras[0])
        b = render(scene.cloud, scene.cameras[0])
        np.testing.assert_array_equal(a.color, b.color)
        np.testing.assert_array_equal(a.depth, b.depth)

    def test_alpha_monotone_in_appended_gaussians(self):
        rng = np.random.default_rng(6)
        scene = generate_synthetic_scene(seed=6, n_gaussians=30, n_cameras=1, layout="orbit")
        cam = scene.cameras[0]
        prev = np.zeros((cam.height, cam.width))
        for n in (5, 10, 20, 30):
            frame = render(scene.cloud.subset(np.arange(n)), cam)
            assert np.all(frame.alpha >= prev - 1e-12)
            prev = frame.alpha

    def test_fronto_parallel_plane_depth(self):
        cam = identity_camera(size=48, f=48.0)
        xs = np.linspace(-0.8, 0.8, 30)
        ys = np.linspace(-0.8, 0.8, 30)
        gx, gy = np.meshgrid(xs, ys)
        n = gx.size
        means = np.stack([gx.ravel(), gy.ravel(), np.full(n, 2.0)], axis=1)
        shc = np.zeros((n, 1, 3))
        shc[:, 0] = rgb_to_sh0(np.full((n, 3), 0.6))
        cloud = GaussianCloud(means, np.tile([1.0, 0, 0, 0], (n, 1)),
                              np.full((n, 3), np.log(0.05)), np.full(n, 6.0), shc)
        frame = render(cloud, cam)
        sel = frame.alpha > 0.5
        assert sel.mean() > 0.5
        np.testing.assert_allclose(frame.depth[sel], 2.0, atol=1e-4)


class TestOracleRenderer:
    def test_single_gaussian_equals_render(self):
        cam = identity_camera()
        cloud = cloud_of(single_gaussian([0.05, -0.1, 1.8], scale=0.15, logit=1.0))
        a = render(cloud, cam, stop_transmittance=0.0)
        b = oracle_render(cloud, cam)
        np.testing.assert_allclose(a.color, b.color, atol=1e-12)

    def test_order_independent_of_insertion(self):
        cam = identity_camera()
        g1 = single_gaussian([0.0, 0.0, 1.5], scale=0.1, logit=1.5, color=(0.9, 0.1, 0.1))
        g2 = single_gaussian([0.02, 0.0, 2.5], scale=0.1, logit=1.5, color=(0.1, 0.9, 0.1))
        a = oracle_render(cloud_of(g1, g2), cam)
        b = oracle_render(cloud_of(g2, g1), cam)
        np.testing.assert_allclose(a.color, b.color, atol=1e-12)

    def test_rejects_large_clouds(self):
        scene = generate_synthetic_scene(seed=0, n_gaussians=20, n_cameras=1, layout="orbit")
        with pytest.raises(ValueError):
            oracle_render(scene.cloud, scene.cameras[0], limit=10)


class TestGradients:
    def test_zero_loss_grad_gives_zero_gradients(self):
        scene = generate_synthetic_scene(seed=2, n_gaussians=10, n_cameras=1, layout="orbit", image_size=24)
        _, grads = render_with_gradients(scene.cloud, scene.cameras[0], np.zeros((24, 24, 3)))
        assert np.all(grads.means == 0) and np.all(grads.sh_coeffs == 0)

    def test_sh0_gradient_sign(self):
        cam = identity_camera()
        cloud = cloud_of(single_gaussian([0.0, 0.0, 2.0], scale=0.15, logit=2.0, color=(0.5, 0.5, 0.5)))
        _, grads = render_with_gradients(cloud, cam, np.ones((32, 32, 3)))
        assert np.all(grads.sh_coeffs[0, 0] > 0)

    def test_matches_finite_differences(self):
        scene = generate_synthetic_scene(seed=3, n_gaussians=8, n_cameras=1, layout="orbit", image_size=24)
        cloud, cam = scene.cloud, scene.cameras[0]
        rng = np.random.default_rng(0)
        lg = rng.normal(size=(24, 24, 3))
        _, grads = render_with_gradients(cloud, cam, lg)

        def loss_of(c):
            return float((lg * render(c, cam, stop_transmittance=0.0).color).sum())

        h = 1e-4
        for arrname in ("means", "rotations", "log_scales", "logit_opacities", "sh_coeffs"):
            garr = getattr(grads, arrname)
            for idxs in np.ndindex(garr.shape):
                an = garr[idxs]
                if abs(an) <= 1e-6:
                    continue
                c1, c2 = cloud.copy(), cloud.copy()
                getattr(c1, arrname)[idxs] += h
                getattr(c2, arrname)[idxs] -= h
                fd = (loss_of(c1) - loss_of(c2)) / (2 * h)
                assert abs(an - fd) <= 1e-3 * max(abs(fd), 1e-9), (arrname, idxs, an, fd)

    def test_depth_and_alpha_gradients_match_fd(self):
        scene = generate_synthetic_scene(seed=9, n_gaussians=6, n_cameras=1, layout="orbit", image_size=24)
        cloud, cam = scene.cloud, scene.cameras[0]
        rng = np.random.default_rng(1)
        base = render(cloud, cam, stop_transmittance=0.0)
        dg = rng.normal(size=(24, 24)) * (base.alpha > 0.5)
        ag = rng.normal(size=(24, 24))
        _, grads = render_with_gradients(cloud, cam, np.zeros((24, 24, 3)), depth_grad=dg, alpha_grad=ag)

        def loss_of(c):
            f = render(c, cam, stop_transmittance=0.0)
            return float((dg * f.depth).sum() + (ag * f.alpha).sum())

        h = 1e-4
        for arrname in ("means", "log_scales", "logit_opacities"):
            garr = getattr(grads, arrname)
            for idxs in np.ndindex(garr.shape):
                an = garr[idxs]
                if abs(an) <= 1e-5:
                    continue
                c1, c2 = cloud.copy(), cloud.copy()
                getattr(c1, arrname)[idxs] += h
                getattr(c2, arrname)[idxs] -= h
                fd = (loss_of(c1) - loss_of(c2)) / (2 * h)
                assert abs(an - fd) <= 2e-3 * max(abs(fd), 1e-6), (arrname, idxs, an, fd)


class TestSphericalHarmonics:
    @pytest.mark.parametrize("degree", [1, 2, 3])
    def test_basis_grad_matches_fd(self, degree):
        rng = np.random.default_rng(degree)
        dirs = rng.normal(size=(5, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        g = sh.basis_grad(degree, dirs)
        h = 1e-6
        for d in range(3):
            e = np.zeros(3)
            e[d] = h
            fd = (sh.basis(degree, dirs + e) - sh.basis(degree, dirs - e)) / (2 * h)
            np.testing.assert_allclose(g[:, :, d], fd, atol=1e-6)

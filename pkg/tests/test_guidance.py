"""Guidance warping and cyclic-consistency uncertainty tests."""

import numpy as np
import pytest

from splatgen.camera import Camera, look_at
from splatgen.frames import FrameSet
from splatgen.guidance import (
    GuidanceFrame,
    UncertaintyParams,
    backward_project,
    bilinear_sample,
    build_guidance_image,
    downsample_uncertainty,
    estimate_uncertainty,
    forward_project,
    nearest_input_view,
    uncertainty_map,
)
from splatgen.render import render
from splatgen.synthetic import occluder_pair_scene


def cam_at(translation, rotation=None, size=64, f=64.0):
    r = np.array([1.0, 0, 0, 0]) if rotation is None else np.asarray(rotation)
    return Camera(fx=f, fy=f, cx=(size - 1) / 2, cy=(size - 1) / 2, width=size, height=size,
                  rotation=r, translation=np.asarray(translation, dtype=float))


def full_frame(depth_value, size=64, color=0.5):
    shape = (size, size)
    return FrameSet(
        color=np.full(shape + (3,), color),
        depth=np.full(shape, float(depth_value)),
        alpha=np.ones(shape),
        valid=np.ones(shape, dtype=bool),
    )


class TestNearestInputView:
    def test_exact_match(self):
        rng = np.random.default_rng(0)
        cams = [cam_at(rng.normal(size=3)) for _ in range(4)]
        assert nearest_input_view(cams[2], cams, lam=1.0) == 2

    def test_hand_evaluated_metric(self):
        # Candidate 0: same rotation, center 1 unit away -> d = 1.
        # Candidate 1: same center, rotated 90 degrees -> d = lam * pi/2.
        # With lam = 2/pi both distances are 1; the tie goes to index 0.
        target = cam_at((0.0, 0.0, 0.0))
        shifted = cam_at((1.0, 0.0, 0.0))
        yaw90 = np.array([np.cos(np.pi / 4), 0.0, np.sin(np.pi / 4), 0.0])
        rotated = cam_at((0.0, 0.0, 0.0), rotation=yaw90)
        assert nearest_input_view(target, [shifted, rotated], lam=2.0 / np.pi) == 0

    def test_trajectory_midpoint_symmetry(self):
        a = cam_at((0.0, 0.0, 0.0))
        b = cam_at((-2.0, 0.0, 0.0))
        before = cam_at((-0.8, 0.0, 0.0))
        after = cam_at((-1.2, 0.0, 0.0))
        assert nearest_input_view(before, [a, b], lam=1.0) == 0
        assert nearest_input_view(after, [a, b], lam=1.0) == 1


class TestForwardProject:
    def test_identity_pose(self):
        cam = cam_at((0.0, 0.0, 0.0))
        p = np.array([[10.0, 20.0], [31.5, 31.5], [63.0, 0.0]])
        q, z = forward_project(p, np.full(3, 2.0), cam, cam)
        np.testing.assert_allclose(q, p, atol=1e-9)
        np.testing.assert_allclose(z, 2.0, atol=1e-12)

    def test_stereo_disparity(self):
        # Input camera center displaced by b along +x: q = p - (fx*b/d, 0).
        b, d, f = 0.3, 2.0, 64.0
        cam_guid = cam_at((0.0, 0.0, 0.0), f=f)
        cam_inp = cam_at((-b, 0.0, 0.0), f=f)  # world-to-cam translation -b => center at +b
        p = np.array([[32.0, 17.0], [5.0, 60.0]])
        q, z = forward_project(p, np.full(2, d), cam_guid, cam_inp)
        expected = p - np.array([f * b / d, 0.0])
        np.testing.assert_allclose(q, expected, atol=1e-9)
        np.testing.assert_allclose(z, d, atol=1e-12)

    def test_infinite_homography(self):
        rng = np.random.default_rng(5)
        from splatgen import quaternion as quat

        r = quat.random_unit(rng)
        # Rotation-only relative pose; at infinite depth q -> K R K^-1 p.
        cam_guid = cam_at((0.0, 0.0, 0.0))
        cam_inp = cam_at((0.0, 0.0, 0.0), rotation=r)
        p = np.array([[20.0, 40.0], [32.0, 32.0]])
        q, _ = forward_project(p, np.full(2, 1e9), cam_guid, cam_inp)
        k = cam_guid.intrinsics
        hmat = k @ quat.to_matrix(r) @ np.linalg.inv(k)
        ph = np.concatenate([p, np.ones((2, 1))], axis=1) @ hmat.T
        expected = ph[:, :2] / ph[:, 2:]
        np.testing.assert_allclose(q, expected, atol=1e-6)

    def test_behind_camera_signalled(self):
        cam_guid = cam_at((0.0, 0.0, 0.0))
        cam_inp = cam_at((0.0, 0.0, -5.0))  # center at +5z, in front of the point
        _, z = forward_project(np.array([[31.5, 31.5]]), np.array([2.0]), cam_guid, cam_inp)
        assert z[0] <= 0.0


class TestBackwardProject:
    def test_identity(self):
        cam = cam_at((0.0, 0.0, 0.0))
        q = np.array([[11.0, 47.0]])
        p, _ = backward_project(q, cam, cam, np.array([3.0]))
        np.testing.assert_allclose(p, q, atol=1e-9)

    def test_cyclic_identity_any_depth(self):
        cam = cam_at((0.2, -0.1, 0.4))
        rng = np.random.default_rng(2)
        p = rng.uniform(0, 63, size=(50, 2))
        depth = rng.uniform(0.5, 5.0, size=50)
        q, zq = forward_project(p, depth, cam, cam)
        p2, _ = backward_project(q, cam, cam, zq)
        assert np.abs(p2 - p).max() < 1e-6

    def test_displacement_linear_in_depth_error(self):
        b, d, f = 0.4, 2.0, 64.0
        cam_guid = cam_at((0.0, 0.0, 0.0), f=f)
        cam_inp = cam_at((-b, 0.0, 0.0), f=f)
        p = np.array([[31.5, 31.5]])
        q, zq = forward_project(p, np.array([d]), cam_guid, cam_inp)
        base, _ = backward_project(q, cam_inp, cam_guid, zq)
        deltas = np.array([0.01, 0.005, 0.0025])
        disps = []
        for dd in deltas:
            moved, _ = backward_project(q, cam_inp, cam_guid, zq + dd)
            disps.append(np.linalg.norm(moved - base))
        disps = np.array(disps)
        # First-order model: |disp| ~ f * b * delta / d^2.
        predicted = f * b * deltas / d**2
        np.testing.assert_allclose(disps, predicted, rtol=0.02)
        np.testing.assert_allclose(disps[:-1] / disps[1:], 2.0, rtol=0.02)


class TestGuidanceImage:
    def test_identity_warp_reproduces_input(self):
        scene, inp, _ = occluder_pair_scene(with_occluder=False)
        cam = scene.cameras[inp]
        gt = render(scene.cloud, cam)
        guid = build_guidance_image(cam, scene.cloud, gt.color, cam, source_view=inp)
        assert guid.valid.mean() > 0.9
        diff = np.abs(guid.image - gt.color)[guid.valid]
        assert diff.max() < 1e-6

    def test_small_baseline_matches_ground_truth_render(self):
        from splatgen.camera import pose_interpolate

        scene, inp, tgt = occluder_pair_scene(with_occluder=False)
        cam_inp = scene.cameras[inp]
        cam_guid = pose_interpolate(scene.cameras[inp], scene.cameras[tgt], 0.2)
        inp_img = render(scene.cloud, cam_inp).color
        gt = render(scene.cloud, cam_guid)
        guid = build_guidance_image(cam_guid, scene.cloud, inp_img, cam_inp, source_view=inp)
        err = np.abs(guid.image - gt.color)[guid.valid].mean()
        assert err <= 2.0 / 255.0

    def test_invalid_pixels_have_unit_uncertainty(self):
        scene, inp, tgt = occluder_pair_scene(with_occluder=False)
        cam_inp, cam_guid = scene.cameras[inp], scene.cameras[tgt]
        inp_img = render(scene.cloud, cam_inp).color
        guid = build_guidance_image(cam_guid, scene.cloud, inp_img, cam_inp)
        assert np.all(guid.uncertainty[~guid.valid] == 1.0)


class TestUncertaintyMap:
    def _hand_built(self, input_depth, guid_depth=2.0, gs_color=0.5, inp_color=0.5):
        f = 64.0
        b = 0.5
        cam_guid = cam_at((0.0, 0.0, 0.0), f=f)
        cam_inp = cam_at((-b, 0.0, 0.0), f=f)
        guid_render = full_frame(guid_depth)
        ys, xs = np.mgrid[0:64, 0:64].astype(np.float64)
        grid = np.stack([xs, ys], axis=-1)
        grid_q, src_depth = forward_project(grid, guid_render.depth, cam_guid, cam_inp)
        guid = GuidanceFrame(
            image=np.full((64, 64, 3), inp_color),
            valid=np.ones((64, 64), dtype=bool),
            uncertainty=np.zeros((64, 64)),
            source_view=0,
            warp_q=grid_q,
            warp_src_depth=src_depth,
        )
        u = uncertainty_map(
            guid, cam_guid, cam_inp,
            gs_render=np.full((64, 64, 3), gs_color),
            input_image=np.full((64, 64, 3), inp_color),
            input_render=full_frame(input_depth),
            params=UncertaintyParams(s1=100.0, s2=0.25),
        )
        return u

    def test_zero_residuals_give_zero(self):
        u = self._hand_built(input_depth=2.0)
        interior = u[:, 16:48]  # columns whose warp stays inside the input frame
        np.testing.assert_allclose(interior, 0.0, atol=1e-9)

    def test_geometric_residual_at_bandwidth(self):
        # Backward depth chosen so |p - p'| is exactly sqrt(s1) = 10 px:
        # p' - p = f*b*(1/d' - 1/d) with f*b = 32 -> 1/d' = 1/2 + 10/32.
        d_prime = 1.0 / (0.5 + 10.0 / 32.0)
        u = self._hand_built(input_depth=d_prime)
        interior = u[:, 40:60]
        np.testing.assert_allclose(interior, 1.0 - np.exp(-1.0), atol=1e-9)

    def test_photometric_residual_at_bandwidth(self):
        # Color residual ||0.5 - 0.789||^2 * 3 channels = s2 = 0.25.
        delta = np.sqrt(0.25 / 3.0)
        u = self._hand_built(input_depth=2.0, gs_color=0.5, inp_color=0.5 + delta)
        interior = u[:, 16:48]
        np.testing.assert_allclose(interior, 1.0 - np.exp(-1.0), atol=1e-9)

    def test_noise_monotonicity(self):
        scene, inp, tgt = occluder_pair_scene(with_occluder=False)
        cam_inp, cam_guid = scene.cameras[inp], scene.cameras[tgt]
        inp_img = render(scene.cloud, cam_inp).color
        guid = build_guidance_image(cam_guid, scene.cloud, inp_img, cam_inp)
        gs = render(scene.cloud, cam_guid)
        inp_render = render(scene.cloud, cam_inp)
        rng = np.random.default_rng(0)
        noise = rng.normal(size=gs.color.shape)
        means = []
        for sigma in (0.0, 0.05, 0.1, 0.2):
            u = uncertainty_map(guid, cam_guid, cam_inp, gs.color + sigma * noise,
                                inp_img, inp_render, UncertaintyParams())
            means.append(u.mean())
        assert means[0] < means[1] < means[2] < means[3]

    def test_consistent_scene_low_and_occluded_high(self):
        params = UncertaintyParams()
        clean, inp, tgt = occluder_pair_scene(with_occluder=False, nested=True)
        cam_inp, cam_guid = clean.cameras[inp], clean.cameras[tgt]
        inp_img = render(clean.cloud, cam_inp).color
        guid = build_guidance_image(cam_guid, clean.cloud, inp_img, cam_inp)
        guid = estimate_uncertainty(guid, cam_guid, clean.cloud, inp_img, cam_inp, params)
        assert guid.uncertainty.mean() <= 0.01

        occl, inp, tgt = occluder_pair_scene(with_occluder=True)
        cam_inp, cam_guid = occl.cameras[inp], occl.cameras[tgt]
        inp_img = render(occl.cloud, cam_inp).color
        guid = build_guidance_image(cam_guid, occl.cloud, inp_img, cam_inp)
        guid = estimate_uncertainty(guid, cam_guid, occl.cloud, inp_img, cam_inp, params)
        inp_render = render(occl.cloud, cam_inp)
        depth_inp, _ = bilinear_sample(inp_render.depth, guid.warp_q)
        # Core occlusion: the input view's surface sits clearly in front of
        # the warped wall point (excludes silhouette depth blends).
        occluded = guid.valid & (guid.warp_src_depth > depth_inp * 1.3) & (depth_inp > 0)
        assert occluded.sum() > 30
        assert guid.uncertainty[occluded].mean() >= 0.5

    def test_relabeling_keeps_residuals_small(self):
        scene, a, b = occluder_pair_scene(with_occluder=False)
        params = UncertaintyParams()
        for src, dst in ((a, b), (b, a)):
            cam_s, cam_d = scene.cameras[src], scene.cameras[dst]
            img = render(scene.cloud, cam_s).color
            guid = build_guidance_image(cam_d, scene.cloud, img, cam_s)
            inp_render = render(scene.cloud, cam_s)
            depth_inp, _ = bilinear_sample(inp_render.depth, guid.warp_q)
            p_back, _ = backward_project(guid.warp_q, cam_s, cam_d, depth_inp)
            ys, xs = np.mgrid[0:64, 0:64].astype(np.float64)
            grid = np.stack([xs, ys], axis=-1)
            resid = np.linalg.norm(p_back - grid, axis=-1)
            assert np.median(resid[guid.valid]) < 0.5


class TestDownsample:
    def test_constant_preserved(self):
        u = np.full((16, 16), 0.3)
        np.testing.assert_allclose(downsample_uncertainty(u, 4, 4), 0.3, atol=1e-12)

    def test_block_average(self):
        u = np.array([[0.0, 0.0], [1.0, 1.0]])
        np.testing.assert_allclose(downsample_uncertainty(u, 1, 1), [[0.5]], atol=1e-15)

    def test_checkerboard(self):
        u = np.indices((8, 8)).sum(axis=0) % 2
        np.testing.assert_allclose(downsample_uncertainty(u.astype(float), 4, 4), 0.5, atol=1e-15)

    def test_non_divisible_sizes(self):
        rng = np.random.default_rng(1)
        u = rng.uniform(size=(10, 7))
        pooled = downsample_uncertainty(u, 3, 2)
        assert pooled.shape == (3, 2)
        assert pooled.min() >= 0.0 and pooled.max() <= 1.0
        np.testing.assert_allclose(pooled.mean(), u.mean(), atol=1e-12)


class TestBilinear:
    def test_exact_at_integer_coordinates(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(8, 8, 3))
        xy = np.array([[3.0, 5.0], [0.0, 0.0], [7.0, 7.0]])
        v, inside = bilinear_sample(img, xy)
        assert inside.all()
        np.testing.assert_allclose(v[0], img[5, 3], atol=1e-12)
        np.testing.assert_allclose(v[2], img[7, 7], atol=1e-12)

    def test_out_of_bounds_flagged(self):
        img = np.ones((8, 8))
        v, inside = bilinear_sample(img, np.array([[-0.1, 2.0], [2.0, 7.4]]))
        assert not inside[0] and not inside[1]
        assert v[0] == 0.0

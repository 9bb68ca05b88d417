import numpy as np
import pytest

from gradcheck import analytic_grads, fd_compare, random_scene
from oracle_raster import oracle_render
from streetsplat.errors import EmptyCloudError, MismatchedForwardError
from streetsplat.gaussians import GaussianCloud, inverse_sigmoid
from streetsplat.geometry import CameraView, Intrinsics, Pose
from streetsplat import rasterizer
from streetsplat.rasterizer import render, render_backward


def axis_view(width=32, height=32, focal=None):
    focal = focal or float(width)
    return CameraView(Intrinsics(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height), Pose.identity())


def one_gaussian(z=4.0, opacity_logit=6.0, color_dc=1.6, scale=0.3):
    return GaussianCloud(
        means=np.array([[0.0, 0.0, z]]),
        log_scales=np.full((1, 3), np.log(scale)),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        opacity_logits=np.array([opacity_logit]),
        sh=np.full((1, 1, 3), color_dc),
    )


class TestForward:
    def test_single_splat_peak_and_decay(self):
        view = axis_view()
        out = render(one_gaussian(), view)
        peak = np.unravel_index(np.argmax(out.color[..., 0]), (32, 32))
        # projected mean sits at the principal point (15.5, 15.5)
        assert abs(peak[0] - 15.5) <= 0.5 and abs(peak[1] - 15.5) <= 0.5
        row = out.color[16, 16:, 0]
        assert np.all(np.diff(row) <= 1e-12), "color must decay away from the center"

    def test_occlusion_ordering(self):
        red = one_gaussian(z=1.0, color_dc=(1.0 - 0.5) / 0.28209479177387814)
        red.sh[0, 0, 1] = red.sh[0, 0, 2] = (0.0 - 0.5) / 0.28209479177387814
        blue = one_gaussian(z=2.0)
        blue.sh[0, 0, 0] = blue.sh[0, 0, 1] = (0.0 - 0.5) / 0.28209479177387814
        blue.sh[0, 0, 2] = (1.0 - 0.5) / 0.28209479177387814
        both = GaussianCloud(
            np.vstack([red.means, blue.means]),
            np.vstack([red.log_scales, blue.log_scales]),
            np.vstack([red.rotations, blue.rotations]),
            np.concatenate([red.opacity_logits, blue.opacity_logits]),
            np.vstack([red.sh, blue.sh]),
        )
        view = axis_view()
        out = render(both, view)
        center = out.color[16, 16]
        assert center[0] > 0.9 and center[2] < 0.05, f"front splat must win, got {center}"
        assert abs(out.depth[16, 16] - 1.0) < 0.05

    def test_alpha_bounded_and_transmittance_consistent(self):
        rng = np.random.default_rng(0)
        cloud, view = random_scene(rng, 24, 16, 16, 1)
        out = render(cloud, view)
        assert out.alpha.min() >= 0.0 and out.alpha.max() <= 1.0
        cache = out.cache
        assert cache.t_final.min() > 0.0 and cache.t_final.max() <= 1.0
        # telescoping identity: accumulated weight + remaining transmittance = 1
        assert np.abs(out.alpha + cache.t_final - 1.0).max() < 1e-9

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(1)
        for trial in range(5):
            n = int(rng.integers(1, 17))
            cloud, view = random_scene(rng, n, 8, 8, min(trial, 3))
            out = render(cloud, view)
            oc, od, oa = oracle_render(cloud, view, 8, 8)
            assert np.abs(out.color - oc).max() < 1e-5
            assert np.abs(out.alpha - oa).max() < 1e-5
            assert np.abs(out.depth - od).max() < 1e-4

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        cloud, view = random_scene(rng, 20, 16, 16, 1)
        out = render(cloud, view)
        perm = rng.permutation(20)
        shuffled = GaussianCloud(
            cloud.means[perm],
            cloud.log_scales[perm],
            cloud.rotations[perm],
            cloud.opacity_logits[perm],
            cloud.sh[perm],
        )
        out2 = render(shuffled, view)
        assert np.array_equal(out.color, out2.color)
        assert np.array_equal(out.depth, out2.depth)

    def test_empty_cloud_raises(self):
        with pytest.raises(EmptyCloudError):
            render(GaussianCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 1, 3))), axis_view())

    def test_empty_frustum_renders_zeros(self):
        cloud = one_gaussian(z=-5.0)
        out = render(cloud, axis_view())
        assert out.color.max() == 0.0 and out.alpha.max() == 0.0 and out.depth.max() == 0.0

    def test_depth_zero_where_alpha_zero(self):
        cloud = one_gaussian(scale=0.05)
        out = render(cloud, axis_view(64, 64))
        assert np.all(out.depth[out.alpha == 0.0] == 0.0)


class TestBackward:
    def test_opacity_gradient_sign(self):
        # brighter-than-nothing Gaussian: more opacity -> more color mass
        view = axis_view()
        cloud = one_gaussian(opacity_logit=0.0)
        out = render(cloud, view)
        buf = render_backward(cloud, view, out, np.ones((32, 32, 3)), np.zeros((32, 32)))
        assert buf.d_opacity_logits[0] > 0.0

    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(3)
        cloud, view = random_scene(rng, 12, 16, 16, 2)
        out = render(cloud, view)
        buf = render_backward(cloud, view, out, np.zeros((16, 16, 3)), np.zeros((16, 16)))
        for arr in (buf.d_means, buf.d_log_scales, buf.d_rotations, buf.d_opacity_logits, buf.d_sh):
            assert np.all(arr == 0.0)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        cloud, view = random_scene(rng, 4, 16, 16, 0)
        out = render(cloud, view)
        with pytest.raises(MismatchedForwardError):
            render_backward(cloud, view, out, np.zeros((8, 8, 3)), np.zeros((8, 8)))

    def test_finite_differences_small_scene(self):
        rng = np.random.default_rng(5)
        cloud, view = random_scene(rng, 6, 16, 16, 1)
        w_color = rng.standard_normal((16, 16, 3))
        w_depth = 0.1 * rng.standard_normal((16, 16))
        checked, agree = fd_compare(cloud, view, (16, 16), w_color, w_depth)
        assert checked > 50
        assert agree / checked >= 0.99, f"{agree}/{checked} coordinates agree"

    def test_seen_and_ndc_stats_populated(self):
        rng = np.random.default_rng(6)
        cloud, view = random_scene(rng, 10, 16, 16, 0)
        out = render(cloud, view)
        buf = render_backward(cloud, view, out, rng.standard_normal((16, 16, 3)), np.zeros((16, 16)))
        assert buf.seen.any()
        assert np.all(buf.ndc_grad_norm[~buf.seen] == 0.0)
        assert np.all(buf.ndc_grad_norm >= 0.0)

    def test_grads_zero_for_offscreen_gaussian(self):
        rng = np.random.default_rng(7)
        cloud, view = random_scene(rng, 5, 16, 16, 0)
        means = cloud.means.copy()
        means[0] = view.pose.apply(np.array([0.0, 0.0, -3.0]))  # behind the camera
        cloud = GaussianCloud(means, cloud.log_scales, cloud.rotations, cloud.opacity_logits, cloud.sh)
        out = render(cloud, view)
        buf = render_backward(cloud, view, out, np.ones((16, 16, 3)), np.ones((16, 16)))
        assert np.all(buf.d_means[0] == 0.0) and not buf.seen[0]


class TestKernelPaths:
    """The jitted kernels and the numpy pair path must agree."""

    @pytest.mark.skipif(not rasterizer._HAVE_NUMBA, reason="numba unavailable")
    def test_forward_paths_agree(self):
        rng = np.random.default_rng(8)
        cloud, view = random_scene(rng, 40, 24, 24, 2)
        prep = rasterizer._prepare(cloud, view, 24, 24, 2)
        order, pc, u, cinv, bbox, color, pre_color, dirs, rho, op = prep
        z = np.ascontiguousarray(pc[:, 2])
        fast = rasterizer._forward_kernel(bbox, u, cinv, op, color, z, 24, 24)
        slow = rasterizer._forward_pairs(bbox, u, cinv, op, color, z, 24, 24)
        for f, s in zip(fast, slow):
            assert np.abs(f - s).max() < 1e-10

    @pytest.mark.skipif(not rasterizer._HAVE_NUMBA, reason="numba unavailable")
    def test_backward_paths_agree(self):
        rng = np.random.default_rng(9)
        cloud, view = random_scene(rng, 40, 24, 24, 1)
        prep = rasterizer._prepare(cloud, view, 24, 24, 1)
        order, pc, u, cinv, bbox, color, pre_color, dirs, rho, op = prep
        z = np.ascontiguousarray(pc[:, 2])
        _, _, _, t_final = rasterizer._forward_pairs(bbox, u, cinv, op, color, z, 24, 24)
        d_col = rng.standard_normal((24, 24, 3))
        d_draw = rng.standard_normal((24, 24))
        d_acc = rng.standard_normal((24, 24))
        fast = rasterizer._backward_kernel(bbox, u, cinv, op, color, z, t_final, d_col, d_draw, d_acc)
        slow = rasterizer._backward_pairs(bbox, u, cinv, op, color, z, t_final, d_col, d_draw, d_acc)
        for f, s in zip(fast, slow):
            f = np.asarray(f, dtype=np.float64)
            s = np.asarray(s, dtype=np.float64)
            scale = max(1.0, np.abs(s).max())
            assert np.abs(f - s).max() / scale < 1e-9

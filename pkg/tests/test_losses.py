import numpy as np
import pytest

from streetsplat.errors import ConfigError, ShapeMismatchError
from streetsplat.lidar import DepthMap
from streetsplat.losses import (
    LossReport,
    LossWeights,
    build_report,
    perceptual_distance,
    pseudo_loss,
    psnr,
    recon_loss,
    ssim,
    ssim_with_grad,
)
from streetsplat.rasterizer import RenderOutput


def ssim_oracle(a, b, size=11, sigma=1.5):
    """Sliding-window SSIM computed with explicit loops and the raw formula."""
    size = min(size, a.shape[0], a.shape[1])
    if size % 2 == 0:
        size -= 1
    half = (size - 1) / 2.0
    x1 = np.arange(size) - half
    g = np.exp(-0.5 * (x1 / sigma) ** 2)
    g = np.outer(g, g)
    g /= g.sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            wa = a[i : i + size, j : j + size]
            wb = b[i : i + size, j : j + size]
            mu_a = (g * wa).sum()
            mu_b = (g * wb).sum()
            var_a = (g * wa * wa).sum() - mu_a**2
            var_b = (g * wb * wb).sum() - mu_b**2
            cov = (g * wa * wb).sum() - mu_a * mu_b
            vals.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(vals))


def as_output(color, depth=None, alpha=None):
    h, w = color.shape[:2]
    depth = np.zeros((h, w)) if depth is None else depth
    alpha = np.ones((h, w)) if alpha is None else alpha
    return RenderOutput(color, depth, alpha, None)


class TestSsim:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(0)
        img = rng.random((20, 24))
        assert abs(ssim(img, img) - 1.0) < 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    def test_matches_windowed_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((18, 18)), rng.random((18, 18))
        assert abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-10

    def test_inverted_checkerboard_negative(self):
        idx = np.indices((16, 16)).sum(axis=0)
        board = (idx % 2).astype(np.float64)
        assert ssim(board, 1.0 - board) < 0.0

    def test_small_image_window_shrinks(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((7, 7)), rng.random((7, 7))
        val = ssim(a, b)
        assert -1.0 <= val <= 1.0
        assert abs(ssim(a, b, ) - ssim_oracle(a, b)) < 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            ssim(np.zeros((8, 8)), np.zeros((9, 8)))

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(4)
        x, y = rng.random((14, 14)), rng.random((14, 14))
        val, grad = ssim_with_grad(x, y)
        assert abs(val - ssim(x, y)) < 1e-12
        eps = 1e-6
        for _ in range(30):
            i, j = rng.integers(14), rng.integers(14)
            xp, xm = x.copy(), x.copy()
            xp[i, j] += eps
            xm[i, j] -= eps
            fd = (ssim(xp, y) - ssim(xm, y)) / (2 * eps)
            assert abs(grad[i, j, 0] - fd) <= 1e-3 * max(abs(fd), 1e-4)


class TestPsnr:
    def test_known_mse(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)  # MSE 0.01
        assert abs(psnr(a, b) - 20.0) < 1e-9

    def test_identical_capped(self):
        img = np.random.default_rng(5).random((8, 8, 3))
        assert psnr(img, img) == 99.0

    def test_unit_error_zero_db(self):
        assert abs(psnr(np.zeros((4, 4)), np.ones((4, 4)))) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            psnr(np.zeros((4, 4)), np.zeros((5, 4)))


class TestPerceptual:
    def test_zero_at_identity(self):
        img = np.random.default_rng(6).random((16, 16, 3))
        val, grad = perceptual_distance(img, img)
        assert val == 0.0
        assert np.all(grad == 0.0)

    def test_positive_on_different_edges(self):
        rng = np.random.default_rng(7)
        a = rng.random((16, 16))
        b = np.zeros((16, 16))
        val, _ = perceptual_distance(a, b)
        assert val > 0.0

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(8)
        x, y = rng.random((12, 12)), rng.random((12, 12))
        _, grad = perceptual_distance(x, y)
        eps = 1e-6
        for _ in range(25):
            i, j = rng.integers(12), rng.integers(12)
            xp, xm = x.copy(), x.copy()
            xp[i, j] += eps
            xm[i, j] -= eps
            fd = (perceptual_distance(xp, y)[0] - perceptual_distance(xm, y)[0]) / (2 * eps)
            assert abs(grad[i, j, 0] - fd) <= 1e-3 * max(abs(fd), 1e-5)


class TestReconLoss:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(9)
        img = rng.random((16, 16, 3))
        depth = np.abs(rng.random((16, 16))) + 0.5
        target_d = DepthMap(depth.copy(), np.ones((16, 16), dtype=bool))
        out = as_output(img.copy(), depth, np.ones((16, 16)))
        t = recon_loss(out, img, target_d, LossWeights())
        assert t.value == 0.0
        # exact zeros: adaptive-moment optimizers amplify any residual dust
        assert np.all(t.d_color == 0.0) and np.all(t.d_depth == 0.0)

    def test_constant_offset_pure_l1(self):
        img = np.full((8, 8, 3), 0.3)
        out = as_output(img + 0.1)
        w = LossWeights(lambda_ssim=0.0, lambda_depth=0.0)
        t = recon_loss(out, img, None, w)
        assert abs(t.value - 0.1) < 1e-12

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(10)
        color = rng.random((16, 16, 3))
        target = rng.random((16, 16, 3))
        depth = rng.random((16, 16)) + 1.0
        tgt_depth = DepthMap(rng.random((16, 16)) + 1.0, rng.random((16, 16)) > 0.3)
        w = LossWeights()
        alpha = np.ones((16, 16))

        def f(c, d):
            return recon_loss(as_output(c, d, alpha), target, tgt_depth, w).value

        t = recon_loss(as_output(color, depth, alpha), target, tgt_depth, w)
        eps = 1e-6
        for _ in range(20):
            i, j, ch = rng.integers(16), rng.integers(16), rng.integers(3)
            cp, cm = color.copy(), color.copy()
            cp[i, j, ch] += eps
            cm[i, j, ch] -= eps
            fd = (f(cp, depth) - f(cm, depth)) / (2 * eps)
            assert abs(t.d_color[i, j, ch] - fd) <= 1e-3 * max(abs(fd), 1e-5)
        for _ in range(10):
            i, j = rng.integers(16), rng.integers(16)
            dp, dm = depth.copy(), depth.copy()
            dp[i, j] += eps
            dm[i, j] -= eps
            fd = (f(color, dp) - f(color, dm)) / (2 * eps)
            assert abs(t.d_depth[i, j] - fd) <= 1e-3 * max(abs(fd), 1e-5)

    def test_masked_depth_pixels_ignored(self):
        rng = np.random.default_rng(11)
        color = rng.random((8, 8, 3))
        depth = rng.random((8, 8)) + 1.0
        valid = np.zeros((8, 8), dtype=bool)
        valid[:4] = True
        base_vals = rng.random((8, 8)) + 1.0
        w = LossWeights()
        out = as_output(color, depth, np.ones((8, 8)))
        t1 = recon_loss(out, color, DepthMap(base_vals, valid.copy()), w)
        tweaked = base_vals.copy()
        tweaked[~valid] += 37.0  # invalid entries must not matter
        t2 = recon_loss(out, color, DepthMap(tweaked, valid.copy()), w)
        assert t1.value == t2.value

    def test_uncovered_pixels_excluded(self):
        color = np.zeros((6, 6, 3))
        depth = np.full((6, 6), 5.0)
        alpha = np.zeros((6, 6))
        alpha[0, 0] = 0.5
        target = DepthMap(np.full((6, 6), 2.0), np.ones((6, 6), dtype=bool))
        t = recon_loss(as_output(color, depth, alpha), color, target, LossWeights())
        # only the single covered pixel contributes: |5 - 2| = 3
        assert abs(t.depth - 3.0) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            recon_loss(as_output(np.zeros((8, 8, 3))), np.zeros((9, 9, 3)), None, LossWeights())


class TestPseudoLoss:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(12)
        img = rng.random((16, 16, 3))
        out = as_output(img.copy())
        t = pseudo_loss(out, img, None, LossWeights())
        assert t.value == 0.0
        assert np.all(t.d_color == 0.0)

    def test_reduces_to_l1(self):
        rng = np.random.default_rng(13)
        img = rng.random((8, 8, 3))
        guidance = rng.random((8, 8, 3))
        w = LossWeights(lambda_p_lpips=0.0, lambda_p_depth=0.0)
        t = pseudo_loss(as_output(img), guidance, None, w)
        assert abs(t.value - np.abs(img - guidance).mean()) < 1e-12

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(14)
        color = rng.random((16, 16, 3))
        guidance = rng.random((16, 16, 3))
        w = LossWeights()
        t = pseudo_loss(as_output(color), guidance, None, w)
        eps = 1e-6
        for _ in range(20):
            i, j, ch = rng.integers(16), rng.integers(16), rng.integers(3)
            cp, cm = color.copy(), color.copy()
            cp[i, j, ch] += eps
            cm[i, j, ch] -= eps
            fd = (
                pseudo_loss(as_output(cp), guidance, None, w).value
                - pseudo_loss(as_output(cm), guidance, None, w).value
            ) / (2 * eps)
            assert abs(t.d_color[i, j, ch] - fd) <= 1e-3 * max(abs(fd), 1e-5)

    def test_external_perceptual_scorer(self):
        calls = []

        def scorer(x, y):
            calls.append(1)
            return 0.25, np.zeros_like(x)

        rng = np.random.default_rng(15)
        img, guidance = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        t = pseudo_loss(as_output(img), guidance, None, LossWeights(), perceptual=scorer)
        assert calls and t.structural == 0.25


class TestReport:
    def test_recomposition_identity(self):
        rng = np.random.default_rng(16)
        img = rng.random((12, 12, 3))
        tgt = rng.random((12, 12, 3))
        guidance = rng.random((12, 12, 3))
        depth = rng.random((12, 12)) + 1.0
        dm = DepthMap(rng.random((12, 12)) + 1.0, np.ones((12, 12), dtype=bool))
        w = LossWeights()
        out = as_output(img, depth, np.ones((12, 12)))
        r = recon_loss(out, tgt, dm, w)
        p = pseudo_loss(out, guidance, dm, w)
        report = build_report(r, p, w)
        assert report.total == report.recompose(w)
        assert report.recon_l1 == r.l1 and report.pseudo_perceptual == p.structural

    def test_term_isolation(self):
        rng = np.random.default_rng(17)
        img = rng.random((12, 12, 3))
        guidance = rng.random((12, 12, 3))
        out = as_output(img)
        for kill in ("lambda_p_lpips", "lambda_p_depth"):
            w = LossWeights(**{kill: 0.0})
            p = pseudo_loss(out, guidance, None, w)
            report = build_report(None, p, w)
            assert report.total == report.recompose(w)

    def test_no_pseudo_terms(self):
        rng = np.random.default_rng(18)
        img = rng.random((8, 8, 3))
        w = LossWeights()
        r = recon_loss(as_output(img), img, None, w)
        report = build_report(r, None, w)
        assert report.pseudo_l1 == 0.0 and report.total == report.recompose(w)

    def test_weights_must_be_nonnegative(self):
        with pytest.raises(ConfigError):
            LossWeights(lambda_ssim=-0.1)

"""Loss terms and image metrics, each with its exact gradient.

Reconstruction loss on training views combines L1, structural
dissimilarity and masked depth L1; the pseudo-view loss swaps the SSIM
term for a perceptual distance. Both return gradients with respect to the
rendered color and depth so the caller can feed them straight into the
splatting backward pass. PSNR and SSIM double as evaluation metrics.

The perceptual distance defaults to a multi-scale Sobel gradient-
magnitude L1; anything callable with the same (value, gradient) contract
can be substituted, so a learned scorer plugs in without touching the
trainer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import ConfigError, ShapeMismatchError
from .lidar import DepthMap
from .rasterizer import RenderOutput

PSNR_CAP_DB = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
PERCEPTUAL_SCALES = 3
GRAD_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_depth: float = 0.1
    lambda_pseudo: float = 0.5
    lambda_p_lpips: float = 0.5
    lambda_p_depth: float = 0.1

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ConfigError(f"{name} must be non-negative, got {value}")


@dataclass(frozen=True)
class LossReport:
    """Raw (unweighted) term values plus the combined total."""

    total: float
    recon_l1: float
    recon_ssim: float
    recon_depth: float
    pseudo_l1: float
    pseudo_perceptual: float
    pseudo_depth: float

    def recompose(self, w: LossWeights) -> float:
        """The total as the weighted combination of the stored terms."""
        return (
            self.recon_l1
            + w.lambda_ssim * self.recon_ssim
            + w.lambda_depth * self.recon_depth
            + w.lambda_pseudo
            * (self.pseudo_l1 + w.lambda_p_lpips * self.pseudo_perceptual + w.lambda_p_depth * self.pseudo_depth)
        )


@dataclass(frozen=True)
class TermGrads:
    """One loss term with its gradients toward the renderer."""

    value: float
    d_color: np.ndarray
    d_depth: np.ndarray
    l1: float
    structural: float  # SSIM complement or perceptual distance
    depth: float


def _require_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: {a.shape} vs {b.shape}")


def _channels(img):
    """View any image as (H, W, C)."""
    img = np.asarray(img, dtype=np.float64)
    return img[:, :, None] if img.ndim == 2 else img


def _gaussian_kernel(size, sigma):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _require_same_shape(a, b, "psnr inputs")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * float(np.log10(1.0 / mse)))


def _ssim_stats(x, y, kernel):
    mu_x = convolve2d(x, kernel, mode="valid")
    mu_y = convolve2d(y, kernel, mode="valid")
    mxx = convolve2d(x * x, kernel, mode="valid")
    myy = convolve2d(y * y, kernel, mode="valid")
    mxy = convolve2d(x * y, kernel, mode="valid")
    var_x = mxx - mu_x * mu_x
    var_y = myy - mu_y * mu_y
    cov = mxy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    return s, mu_x, mu_y, a1, a2, b1, b2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity; tri-channel images average per-channel maps.

    11x11 Gaussian window (sigma 1.5) shrunk to the image when it is
    smaller, constants C1=0.01^2 and C2=0.03^2 for a unit dynamic range.
    """
    a = _channels(a)
    b = _channels(b)
    _require_same_shape(a, b, "ssim inputs")
    h, w, _ = a.shape
    size = min(SSIM_WINDOW, h, w)
    if size % 2 == 0:
        size -= 1
    kernel = _gaussian_kernel(size, SSIM_SIGMA)
    total = 0.0
    for ch in range(a.shape[2]):
        s, *_ = _ssim_stats(a[:, :, ch], b[:, :, ch], kernel)
        total += float(s.mean())
    return total / a.shape[2]


def ssim_with_grad(x: np.ndarray, y: np.ndarray):
    """SSIM and its gradient with respect to the first argument."""
    x = _channels(x)
    y = _channels(y)
    _require_same_shape(x, y, "ssim inputs")
    if np.array_equal(x, y):
        # the maximum of SSIM: exactly 1 with an exactly zero gradient;
        # the adjoint formulas below would leave rounding dust instead,
        # which adaptive-moment optimizers amplify into full-size steps
        return 1.0, np.zeros(x.shape)
    h, w, n_ch = x.shape
    size = min(SSIM_WINDOW, h, w)
    if size % 2 == 0:
        size -= 1
    kernel = _gaussian_kernel(size, SSIM_SIGMA)
    total = 0.0
    grad = np.zeros_like(x)
    for ch in range(n_ch):
        xc, yc = x[:, :, ch], y[:, :, ch]
        s, mu_x, mu_y, a1, a2, b1, b2 = _ssim_stats(xc, yc, kernel)
        u = 1.0 / (s.size * n_ch)
        total += float(s.mean()) / n_ch
        # partials of S against the raw window moments of x
        d_mu = (2.0 * mu_y * (a2 - a1)) / (b1 * b2) - 2.0 * mu_x * s * (b2 - b1) / (b1 * b2)
        d_mxx = -s / b2
        d_mxy = 2.0 * a1 / (b1 * b2)
        # adjoint of each valid-mode convolution (kernel is symmetric)
        grad[:, :, ch] = (
            convolve2d(d_mu * u, kernel, mode="full")
            + 2.0 * xc * convolve2d(d_mxx * u, kernel, mode="full")
            + yc * convolve2d(d_mxy * u, kernel, mode="full")
        )
    return total, grad


def _avg_pool2(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    t = img[:h, :w]
    return 0.25 * (t[0::2, 0::2] + t[0::2, 1::2] + t[1::2, 0::2] + t[1::2, 1::2])


def _avg_pool2_adjoint(d_pooled, shape):
    out = np.zeros(shape)
    h, w = shape[0] // 2 * 2, shape[1] // 2 * 2
    spread = 0.25 * d_pooled
    out[0:h:2, 0:w:2] = spread
    out[0:h:2, 1:w:2] = spread
    out[1:h:2, 0:w:2] = spread
    out[1:h:2, 1:w:2] = spread
    return out


def _grad_magnitude(img):
    gx = convolve2d(img, SOBEL_X, mode="same")
    gy = convolve2d(img, SOBEL_Y, mode="same")
    m = np.sqrt(gx * gx + gy * gy + GRAD_EPS)
    return m, gx, gy


def _grad_magnitude_adjoint(d_m, gx, gy, m):
    d_gx = d_m * gx / m
    d_gy = d_m * gy / m
    # convolve2d flips its kernel; Sobel kernels are antisymmetric
    return convolve2d(d_gx, -SOBEL_X, mode="same") + convolve2d(d_gy, -SOBEL_Y, mode="same")


def perceptual_distance(x: np.ndarray, y: np.ndarray):
    """Multi-scale Sobel gradient-magnitude L1 with gradient w.r.t. x.

    A deterministic stand-in for a learned perceptual metric: edge maps
    compared at three dyadic scales, averaged.
    """
    x = _channels(x)
    y = _channels(y)
    _require_same_shape(x, y, "perceptual inputs")
    n_ch = x.shape[2]
    value = 0.0
    grad = np.zeros_like(x)
    for ch in range(n_ch):
        xs, ys = x[:, :, ch], y[:, :, ch]
        shapes, pieces = [], []
        for scale in range(PERCEPTUAL_SCALES):
            mx, gxx, gxy = _grad_magnitude(xs)
            my, _, _ = _grad_magnitude(ys)
            diff = mx - my
            u = 1.0 / (diff.size * PERCEPTUAL_SCALES * n_ch)
            value += float(np.abs(diff).sum()) * u
            d_mx = np.sign(diff) * u
            pieces.append(_grad_magnitude_adjoint(d_mx, gxx, gxy, mx))
            shapes.append(xs.shape)
            if min(xs.shape) < 4 or scale == PERCEPTUAL_SCALES - 1:
                break
            xs = _avg_pool2(xs)
            ys = _avg_pool2(ys)
        # walk the pooling chain backwards, coarsest first
        acc = pieces[-1]
        for level in range(len(pieces) - 2, -1, -1):
            acc = _avg_pool2_adjoint(acc, shapes[level]) + pieces[level]
        grad[:, :, ch] = acc
    return value, grad


def _l1_with_grad(x, y):
    diff = x - y
    n = diff.size
    return float(np.abs(diff).mean()), np.sign(diff) / n


def _masked_depth_l1(rendered_depth, alpha, target: DepthMap):
    """Mean absolute depth error over pixels that are valid on both sides."""
    _require_same_shape(rendered_depth, target.values, "depth maps")
    use = target.valid & (alpha > 0.0)
    n = int(use.sum())
    grad = np.zeros_like(rendered_depth)
    if n == 0:
        return 0.0, grad
    diff = np.where(use, rendered_depth - target.values, 0.0)
    grad[use] = np.sign(diff[use]) / n
    return float(np.abs(diff[use]).mean()), grad


def recon_loss(rendered: RenderOutput, target_image: np.ndarray, target_depth: DepthMap | None, w: LossWeights) -> TermGrads:
    """Training-view loss: L1 + lambda_ssim (1 - SSIM) + lambda_depth depth-L1."""
    target_image = np.asarray(target_image, dtype=np.float64)
    _require_same_shape(rendered.color, target_image, "recon images")
    l1, d_l1 = _l1_with_grad(rendered.color, target_image)
    s_val, d_s = ssim_with_grad(rendered.color, target_image)
    dssim = 1.0 - s_val
    if target_depth is not None and w.lambda_depth > 0:
        depth_term, d_depth_term = _masked_depth_l1(rendered.depth, rendered.alpha, target_depth)
    else:
        depth_term, d_depth_term = 0.0, np.zeros_like(rendered.depth)
    value = l1 + w.lambda_ssim * dssim + w.lambda_depth * depth_term
    d_color = d_l1 - w.lambda_ssim * d_s
    d_depth = w.lambda_depth * d_depth_term
    return TermGrads(value, d_color, d_depth, l1, dssim, depth_term)


def pseudo_loss(
    rendered: RenderOutput,
    guidance: np.ndarray,
    pseudo_depth: DepthMap | None,
    w: LossWeights,
    perceptual=perceptual_distance,
) -> TermGrads:
    """Pseudo-view loss against the guidance image: L1 + perceptual + depth."""
    guidance = np.asarray(guidance, dtype=np.float64)
    _require_same_shape(rendered.color, guidance, "pseudo images")
    l1, d_l1 = _l1_with_grad(rendered.color, guidance)
    if w.lambda_p_lpips > 0:
        p_val, d_p = perceptual(rendered.color, guidance)
    else:
        p_val, d_p = 0.0, np.zeros_like(rendered.color)
    if pseudo_depth is not None and w.lambda_p_depth > 0:
        depth_term, d_depth_term = _masked_depth_l1(rendered.depth, rendered.alpha, pseudo_depth)
    else:
        depth_term, d_depth_term = 0.0, np.zeros_like(rendered.depth)
    value = l1 + w.lambda_p_lpips * p_val + w.lambda_p_depth * depth_term
    d_color = d_l1 + w.lambda_p_lpips * d_p
    d_depth = w.lambda_p_depth * d_depth_term
    return TermGrads(value, d_color, d_depth, l1, p_val, depth_term)


def build_report(recon: TermGrads | None, pseudo: TermGrads | None, w: LossWeights) -> LossReport:
    """Combine per-view terms into a report whose total recomposes exactly."""
    r_l1 = recon.l1 if recon else 0.0
    r_ssim = recon.structural if recon else 0.0
    r_depth = recon.depth if recon else 0.0
    p_l1 = pseudo.l1 if pseudo else 0.0
    p_perc = pseudo.structural if pseudo else 0.0
    p_depth = pseudo.depth if pseudo else 0.0
    total = (
        r_l1
        + w.lambda_ssim * r_ssim
        + w.lambda_depth * r_depth
        + w.lambda_pseudo * (p_l1 + w.lambda_p_lpips * p_perc + w.lambda_p_depth * p_depth)
    )
    return LossReport(total, r_l1, r_ssim, r_depth, p_l1, p_perc, p_depth)

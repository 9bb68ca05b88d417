"""Condition encoding: text, reference images, reference depths.

Token layout mirrors a CLIP-style pipeline at toy scale. A text prompt
becomes L_T tokens of width D through a fixed random embedding table; each
reference image becomes L_I patch tokens through a fixed random projection
of pooled patch statistics; depth maps go through a second projection of
identical structure. Reference depth tokens are fused into the image
tokens by elementwise averaging, and the conditioning sequence handed to
the denoiser is the concatenation [text | prev reference | next reference]
of length L_T + 2*L_I. With probability ``dropout_p`` the whole condition
is replaced by zeros, which is what lets the downstream sampler trade off
conditioned and unconditioned predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ShapeMismatch(ValueError):
    """Inputs that must share a shape do not."""


@dataclass(frozen=True)
class ConditionEmbedding:
    text_tokens: np.ndarray  # (L_T, D)
    image_prev: np.ndarray  # (L_I, D)
    image_next: np.ndarray  # (L_I, D)
    depth_prev: np.ndarray | None  # (L_I, D)
    depth_next: np.ndarray | None
    fused_prev: np.ndarray | None  # (L_I, D)
    fused_next: np.ndarray | None
    concatenated: np.ndarray  # (L_T + 2*L_I, D)

    @property
    def length(self) -> int:
        return self.concatenated.shape[0]


def fuse_tokens(image_tokens: np.ndarray, depth_tokens: np.ndarray) -> np.ndarray:
    """Average-pool fusion of image and depth tokens of equal shape."""
    if image_tokens.shape != depth_tokens.shape:
        raise ShapeMismatch(
            f"cannot fuse tokens of shape {image_tokens.shape} with {depth_tokens.shape}"
        )
    return 0.5 * (image_tokens + depth_tokens)


class EncoderBank:
    """Fixed-seed toy encoders sharing a token width D.

    l_i must be a perfect square; image patches live on a sqrt(L_I) grid.
    """

    def __init__(self, l_t: int = 77, l_i: int = 49, d: int = 64, seed: int = 0):
        grid = math.isqrt(l_i)
        if grid * grid != l_i:
            raise ValueError(f"l_i must be a perfect square, got {l_i}")
        if l_t < 1 or d < 1:
            raise ValueError("l_t and d must be positive")
        self.l_t = l_t
        self.l_i = l_i
        self.d = d
        self.grid = grid
        rng = np.random.default_rng(seed)
        scale = 1.0 / math.sqrt(d)
        self._vocab = rng.normal(0.0, scale, (256, d))
        self._text_pos = rng.normal(0.0, scale, (l_t, d))
        # patch statistics are (mean R, mean G, mean B, 1) resp. (mean depth, valid frac, 1)
        self._image_proj = rng.normal(0.0, scale, (4, d))
        self._image_pos = rng.normal(0.0, scale, (l_i, d))
        self._depth_proj = rng.normal(0.0, scale, (3, d))
        self._depth_pos = rng.normal(0.0, scale, (l_i, d))

    def encode_text(self, text: str) -> np.ndarray:
        """Byte-level lookup into a fixed table, padded or truncated to L_T."""
        tokens = np.zeros((self.l_t, self.d))
        data = text.encode("utf-8")[: self.l_t]
        for i, byte in enumerate(data):
            tokens[i] = self._vocab[byte]
        return tokens + self._text_pos

    def _patch_cells(self, array: np.ndarray) -> list[tuple[slice, slice]]:
        h, w = array.shape[:2]
        ys = np.linspace(0, h, self.grid + 1).astype(int)
        xs = np.linspace(0, w, self.grid + 1).astype(int)
        return [
            (slice(ys[r], max(ys[r + 1], ys[r] + 1)), slice(xs[c], max(xs[c + 1], xs[c] + 1)))
            for r in range(self.grid)
            for c in range(self.grid)
        ]

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeMismatch(f"expected an (H, W, 3) image, got shape {image.shape}")
        stats = np.empty((self.l_i, 4))
        for k, (rows, cols) in enumerate(self._patch_cells(image)):
            cell = image[rows, cols]
            stats[k, :3] = cell.mean(axis=(0, 1))
            stats[k, 3] = 1.0
        return stats @ self._image_proj + self._image_pos

    def encode_depth(self, depth: np.ndarray) -> np.ndarray:
        """Depth patches carry (mean valid depth, valid fraction, 1); 0 marks invalid."""
        depth = np.asarray(depth, dtype=np.float64)
        if depth.ndim != 2:
            raise ShapeMismatch(f"expected an (H, W) depth map, got shape {depth.shape}")
        stats = np.empty((self.l_i, 3))
        for k, (rows, cols) in enumerate(self._patch_cells(depth)):
            cell = depth[rows, cols]
            valid = cell > 0
            stats[k, 0] = cell[valid].mean() if np.any(valid) else 0.0
            stats[k, 1] = valid.mean()
            stats[k, 2] = 1.0
        return stats @ self._depth_proj + self._depth_pos


def embed_conditions(
    encoders: EncoderBank,
    text: str,
    ref_prev: np.ndarray,
    ref_next: np.ndarray,
    depth_prev: np.ndarray | None = None,
    depth_next: np.ndarray | None = None,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
) -> ConditionEmbedding:
    """Encode one conditioning set into a (L_T + 2*L_I, D) token sequence.

    Token order is [text | prev | next]; the two references are not
    interchangeable. When depth maps are given, the fused image+depth
    tokens take the image tokens' slots in the concatenation. One draw
    against dropout_p empties the entire condition (all-zero tokens).
    """
    ref_prev = np.asarray(ref_prev, dtype=np.float64)
    ref_next = np.asarray(ref_next, dtype=np.float64)
    if ref_prev.shape != ref_next.shape:
        raise ShapeMismatch(
            f"reference images differ in shape: {ref_prev.shape} vs {ref_next.shape}"
        )
    if (depth_prev is None) != (depth_next is None):
        raise ShapeMismatch("provide both reference depths or neither")

    dropped = False
    if dropout_p > 0.0:
        if rng is None:
            raise ValueError("dropout_p > 0 requires an rng")
        dropped = bool(rng.random() < dropout_p)

    text_tokens = encoders.encode_text(text)
    image_prev = encoders.encode_image(ref_prev)
    image_next = encoders.encode_image(ref_next)
    d_prev = d_next = f_prev = f_next = None
    slot_prev, slot_next = image_prev, image_next
    if depth_prev is not None:
        d_prev = encoders.encode_depth(np.asarray(depth_prev, dtype=np.float64))
        d_next = encoders.encode_depth(np.asarray(depth_next, dtype=np.float64))
        f_prev = fuse_tokens(image_prev, d_prev)
        f_next = fuse_tokens(image_next, d_next)
        slot_prev, slot_next = f_prev, f_next

    concatenated = np.concatenate([text_tokens, slot_prev, slot_next], axis=0)
    if dropped:
        zero = np.zeros_like
        text_tokens, image_prev, image_next = zero(text_tokens), zero(image_prev), zero(image_next)
        if d_prev is not None:
            d_prev, d_next, f_prev, f_next = zero(d_prev), zero(d_next), zero(f_prev), zero(f_next)
        concatenated = np.zeros_like(concatenated)

    return ConditionEmbedding(
        text_tokens=text_tokens,
        image_prev=image_prev,
        image_next=image_next,
        depth_prev=d_prev,
        depth_next=d_next,
        fused_prev=f_prev,
        fused_next=f_next,
        concatenated=concatenated,
    )

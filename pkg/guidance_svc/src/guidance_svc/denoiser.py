"""Toy conditioned noise predictor with two-stage training semantics.

The latent is the input image average-pooled 4x. Noise mixes in linearly
over ``T_MAX`` levels: z_t = (1 - t/T) z_0 + (t/T) eps. The predictor is
a two-layer convolutional stack; its first layer (plus the timestep and
condition projections) is the "encoder half". Stage 1 trains the whole
stack. Stage 2 freezes it, clones the encoder half into a control branch
that additionally sees a depth hint, and feeds the branch's features back
through an output gate initialized to zero, so at initialization the
stage-2 prediction is bit-identical to the stage-1 prediction.

All gradients here are hand-derived; tests pin them against central
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding import ConditionEmbedding, EncoderBank

T_MAX = 10
LATENT_STRIDE = 4


def to_latent(image: np.ndarray) -> np.ndarray:
    """Average-pool an (H, W, 3) image to a (3, H/4, W/4) latent."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    hp = -h % LATENT_STRIDE
    wp = -w % LATENT_STRIDE
    if hp or wp:
        image = np.pad(image, ((0, hp), (0, wp), (0, 0)), mode="edge")
    h2, w2 = image.shape[0] // LATENT_STRIDE, image.shape[1] // LATENT_STRIDE
    pooled = image.reshape(h2, LATENT_STRIDE, w2, LATENT_STRIDE, 3).mean(axis=(1, 3))
    return np.transpose(pooled, (2, 0, 1))


def from_latent(latent: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor upsample of a (3, h, w) latent back to (H, W, 3)."""
    img = np.transpose(latent, (1, 2, 0))
    img = np.repeat(np.repeat(img, LATENT_STRIDE, axis=0), LATENT_STRIDE, axis=1)
    return img[:height, :width]


def noisy_latent(z0: np.ndarray, eps: np.ndarray, t: int) -> np.ndarray:
    tau = t / T_MAX
    return (1.0 - tau) * z0 + tau * eps


def _conv2d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 convolution; x is (Cin, h, w), w is (Cout, Cin, 3, 3)."""
    cin, h, wid = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    # im2col: rows are (Cin*9), one column per output pixel
    cols = np.empty((cin * 9, h * wid))
    k = 0
    for c in range(cin):
        for dy in range(3):
            for dx in range(3):
                cols[k] = xp[c, dy : dy + h, dx : dx + wid].reshape(-1)
                k += 1
    out = w.reshape(w.shape[0], -1) @ cols
    return out.reshape(w.shape[0], h, wid)


def _conv2d_input_grad(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient of _conv2d w.r.t. its input: correlate g with the flipped kernel."""
    flipped = np.transpose(w[:, :, ::-1, ::-1], (1, 0, 2, 3))
    return _conv2d(g, np.ascontiguousarray(flipped))


def _conv2d_weight_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient of _conv2d w.r.t. the kernel; x (Cin,h,w), g (Cout,h,w)."""
    cin, h, wid = x.shape
    cout = g.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    grad = np.empty((cout, cin, 3, 3))
    gflat = g.reshape(cout, -1)
    for c in range(cin):
        for dy in range(3):
            for dx in range(3):
                patch = xp[c, dy : dy + h, dx : dx + wid].reshape(-1)
                grad[:, c, dy, dx] = gflat @ patch
    return grad


@dataclass
class EncoderHalf:
    """First conv layer plus timestep and condition projections."""

    conv_w: np.ndarray  # (F, 3, 3, 3)
    conv_b: np.ndarray  # (F,)
    time_w: np.ndarray  # (F,)
    cond_w: np.ndarray  # (F, D)

    def copy(self) -> "EncoderHalf":
        return EncoderHalf(
            self.conv_w.copy(), self.conv_b.copy(), self.time_w.copy(), self.cond_w.copy()
        )

    def features(self, z: np.ndarray, t: int, cond_vec: np.ndarray) -> np.ndarray:
        """Pre-activation feature map for latent z at level t."""
        bias = self.conv_b + self.time_w * (t / T_MAX) + self.cond_w @ cond_vec
        return _conv2d(z, self.conv_w) + bias[:, None, None]


@dataclass
class DenoiserState:
    encoders: EncoderBank
    enc: EncoderHalf
    dec_w: np.ndarray  # (3, F, 3, 3)
    dec_b: np.ndarray  # (3,)
    control: EncoderHalf | None = None
    hint_w: np.ndarray | None = None  # (3, 1, 3, 3) depth -> latent-channel hint
    gate_w: np.ndarray | None = None  # (F,) zero-initialized output gate
    meta: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.enc.conv_w.shape[0]

    def start_stage2(self) -> None:
        """Clone the encoder half into the control branch; gate starts closed."""
        self.control = self.enc.copy()
        rng = np.random.default_rng(int(self.meta.get("seed", 0)) + 1)
        self.hint_w = rng.normal(0.0, 0.1, (3, 1, 3, 3))
        self.gate_w = np.zeros(self.n_features)


def init_state(
    seed: int = 0, n_features: int = 8, l_t: int = 77, l_i: int = 49, d: int = 64
) -> DenoiserState:
    rng = np.random.default_rng(seed)
    f = n_features
    enc = EncoderHalf(
        conv_w=rng.normal(0.0, 0.2, (f, 3, 3, 3)),
        conv_b=np.zeros(f),
        time_w=rng.normal(0.0, 0.2, f),
        cond_w=rng.normal(0.0, 0.2, (f, d)),
    )
    return DenoiserState(
        encoders=EncoderBank(l_t=l_t, l_i=l_i, d=d, seed=seed),
        enc=enc,
        dec_w=rng.normal(0.0, 0.2, (3, f, 3, 3)),
        dec_b=np.zeros(3),
        meta={"seed": int(seed), "n_features": f, "l_t": l_t, "l_i": l_i, "d": d},
    )


def _cond_vec(cond: ConditionEmbedding) -> np.ndarray:
    return cond.concatenated.mean(axis=0)


def predict_noise(
    state: DenoiserState,
    z_t: np.ndarray,
    t: int,
    cond: ConditionEmbedding,
    depth_hint: np.ndarray | None = None,
) -> np.ndarray:
    """Noise estimate for a latent at level t; (3, h, w) in, (3, h, w) out."""
    c = _cond_vec(cond)
    h_pre = state.enc.features(z_t, t, c)
    h = np.maximum(h_pre, 0.0)
    if depth_hint is not None:
        if state.control is None:
            raise ValueError("depth conditioning requires stage-2 initialization")
        hint = _conv2d(depth_hint[None, :, :], state.hint_w)
        hc_pre = state.control.features(z_t + hint, t, c)
        h = h + state.gate_w[:, None, None] * np.maximum(hc_pre, 0.0)
    return _conv2d(h, state.dec_w) + state.dec_b[:, None, None]


def _sample_terms(state, sample, stage2):
    """Forward pass plus the residual for one (image, text, refs[, depths]) sample."""
    depth_hint = None
    if stage2:
        target_depth = np.asarray(sample["depth_target"], dtype=np.float64)
        depth_hint = to_latent(np.repeat(target_depth[:, :, None], 3, axis=2))[0]
    cond = sample["cond"]
    z0 = to_latent(sample["image"])
    rng = np.random.default_rng(sample["noise_seed"])
    eps = rng.standard_normal(z0.shape)
    t = int(sample["t"])
    z_t = noisy_latent(z0, eps, t)
    eps_hat = predict_noise(state, z_t, t, cond, depth_hint)
    return z_t, t, cond, depth_hint, eps, eps_hat


def stage1_loss(state: DenoiserState, batch: list[dict]) -> float:
    """Mean over the batch of the summed squared noise-prediction error."""
    total = 0.0
    for sample in batch:
        _, _, _, _, eps, eps_hat = _sample_terms(state, sample, stage2=False)
        total += float(np.sum((eps - eps_hat) ** 2))
    return total / len(batch)


def stage2_loss(state: DenoiserState, batch: list[dict]) -> float:
    """Stage-1 objective with the depth hint routed through the control branch."""
    if state.control is None:
        raise ValueError("stage2_loss requires start_stage2() first")
    total = 0.0
    for sample in batch:
        _, _, _, _, eps, eps_hat = _sample_terms(state, sample, stage2=True)
        total += float(np.sum((eps - eps_hat) ** 2))
    return total / len(batch)


def _zero_grads(like: EncoderHalf) -> dict:
    return {
        "conv_w": np.zeros_like(like.conv_w),
        "conv_b": np.zeros_like(like.conv_b),
        "time_w": np.zeros_like(like.time_w),
        "cond_w": np.zeros_like(like.cond_w),
    }


def stage1_grads(state: DenoiserState, batch: list[dict]) -> dict:
    """Gradients of stage1_loss for every trainable array of the stack."""
    g_enc = _zero_grads(state.enc)
    g_dec_w = np.zeros_like(state.dec_w)
    g_dec_b = np.zeros_like(state.dec_b)
    for sample in batch:
        z_t, t, cond, _, eps, eps_hat = _sample_terms(state, sample, stage2=False)
        c = _cond_vec(cond)
        h_pre = state.enc.features(z_t, t, c)
        h = np.maximum(h_pre, 0.0)
        g_out = 2.0 * (eps_hat - eps)  # (3, h, w)
        g_dec_w += _conv2d_weight_grad(h, g_out)
        g_dec_b += g_out.sum(axis=(1, 2))
        g_h = _conv2d_input_grad(g_out, state.dec_w)
        g_pre = g_h * (h_pre > 0.0)
        g_enc["conv_w"] += _conv2d_weight_grad(z_t, g_pre)
        per_channel = g_pre.sum(axis=(1, 2))
        g_enc["conv_b"] += per_channel
        g_enc["time_w"] += per_channel * (t / T_MAX)
        g_enc["cond_w"] += np.outer(per_channel, c)
    scale = 1.0 / len(batch)
    return {
        "enc": {k: v * scale for k, v in g_enc.items()},
        "dec_w": g_dec_w * scale,
        "dec_b": g_dec_b * scale,
    }


def stage2_grads(state: DenoiserState, batch: list[dict]) -> dict:
    """Gradients of stage2_loss. The stage-1 stack is frozen: its entries
    are exact zeros, and only the control branch, hint, and gate receive
    real gradients."""
    if state.control is None:
        raise ValueError("stage2_grads requires start_stage2() first")
    g_ctrl = _zero_grads(state.control)
    g_hint = np.zeros_like(state.hint_w)
    g_gate = np.zeros_like(state.gate_w)
    for sample in batch:
        z_t, t, cond, depth_hint, eps, eps_hat = _sample_terms(state, sample, stage2=True)
        c = _cond_vec(cond)
        hint = _conv2d(depth_hint[None, :, :], state.hint_w)
        hc_pre = state.control.features(z_t + hint, t, c)
        hc = np.maximum(hc_pre, 0.0)
        g_out = 2.0 * (eps_hat - eps)
        g_h = _conv2d_input_grad(g_out, state.dec_w)
        g_gate += (g_h * hc).sum(axis=(1, 2))
        g_hc = g_h * state.gate_w[:, None, None]
        g_pre = g_hc * (hc_pre > 0.0)
        g_ctrl["conv_w"] += _conv2d_weight_grad(z_t + hint, g_pre)
        per_channel = g_pre.sum(axis=(1, 2))
        g_ctrl["conv_b"] += per_channel
        g_ctrl["time_w"] += per_channel * (t / T_MAX)
        g_ctrl["cond_w"] += np.outer(per_channel, c)
        g_z = _conv2d_input_grad(g_pre, state.control.conv_w)
        g_hint += _conv2d_weight_grad(depth_hint[None, :, :], g_z)
    scale = 1.0 / len(batch)
    return {
        "enc": _zero_grads(state.enc),
        "dec_w": np.zeros_like(state.dec_w),
        "dec_b": np.zeros_like(state.dec_b),
        "control": {k: v * scale for k, v in g_ctrl.items()},
        "hint_w": g_hint * scale,
        "gate_w": g_gate * scale,
    }


def denoise(
    state: DenoiserState,
    image: np.ndarray,
    cond: ConditionEmbedding,
    t: int,
    seed: int,
    t_min: int = 0,
    depth_target: np.ndarray | None = None,
) -> np.ndarray:
    """Noise the image's latent to level t, then walk it back to t_min.

    One predictor application per level. Returns an (H, W, 3) image in
    [0, 1] at the input resolution.
    """
    height, width = np.asarray(image).shape[:2]
    z0 = to_latent(image)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(z0.shape)
    t = int(np.clip(t, 0, T_MAX))
    z = noisy_latent(z0, eps, t)
    depth_hint = None
    if depth_target is not None and state.control is not None:
        depth_hint = to_latent(np.repeat(np.asarray(depth_target)[:, :, None], 3, axis=2))[0]
    for level in range(t, t_min, -1):
        tau = level / T_MAX
        eps_hat = predict_noise(state, z, level, cond, depth_hint)
        # one linear-schedule step toward the implied clean latent
        z0_hat = (z - tau * eps_hat) / max(1.0 - tau, 1.0 / T_MAX)
        tau_next = (level - 1) / T_MAX
        z = (1.0 - tau_next) * z0_hat + tau_next * eps_hat
    return np.clip(from_latent(z, height, width), 0.0, 1.0)


def save_state(path, state: DenoiserState) -> None:
    arrays = {
        "enc_conv_w": state.enc.conv_w,
        "enc_conv_b": state.enc.conv_b,
        "enc_time_w": state.enc.time_w,
        "enc_cond_w": state.enc.cond_w,
        "dec_w": state.dec_w,
        "dec_b": state.dec_b,
        "meta_seed": np.int64(state.meta.get("seed", 0)),
        "meta_l_t": np.int64(state.encoders.l_t),
        "meta_l_i": np.int64(state.encoders.l_i),
        "meta_d": np.int64(state.encoders.d),
    }
    if state.control is not None:
        arrays.update(
            ctrl_conv_w=state.control.conv_w,
            ctrl_conv_b=state.control.conv_b,
            ctrl_time_w=state.control.time_w,
            ctrl_cond_w=state.control.cond_w,
            hint_w=state.hint_w,
            gate_w=state.gate_w,
        )
    np.savez(path, **arrays)


def load_state(path) -> DenoiserState:
    with np.load(path) as data:
        seed = int(data["meta_seed"])
        state = init_state(
            seed=seed,
            n_features=int(data["enc_conv_w"].shape[0]),
            l_t=int(data["meta_l_t"]),
            l_i=int(data["meta_l_i"]),
            d=int(data["meta_d"]),
        )
        state.enc = EncoderHalf(
            conv_w=data["enc_conv_w"],
            conv_b=data["enc_conv_b"],
            time_w=data["enc_time_w"],
            cond_w=data["enc_cond_w"],
        )
        state.dec_w = data["dec_w"]
        state.dec_b = data["dec_b"]
        if "ctrl_conv_w" in data:
            state.control = EncoderHalf(
                conv_w=data["ctrl_conv_w"],
                conv_b=data["ctrl_conv_b"],
                time_w=data["ctrl_time_w"],
                cond_w=data["ctrl_cond_w"],
            )
            state.hint_w = data["hint_w"]
            state.gate_w = data["gate_w"]
    return state

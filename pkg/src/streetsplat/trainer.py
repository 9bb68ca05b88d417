"""Optimization loop: per-view reconstruction steps, periodic pseudo-view
guidance events, exponential learning-rate schedule, densification, and
checkpoint/resume plumbing.

The loop is deterministic by construction: every random draw comes from a
generator freshly seeded with (run seed, iteration, purpose tag), so a
resumed run replays the exact draws of an uninterrupted one. The
`deterministic` flag is accepted for interface stability; reductions here
are sequential either way, so both settings are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NoValidPixelsError, ProviderUnavailableError
from .gaussians import (
    DensifyConfig,
    GaussianCloud,
    densify_and_prune,
    init_from_points,
    reset_opacities,
)
from .geometry import PseudoViewConfig, sample_pseudo_views
from .guidance import GuidanceRequest, StrengthSchedule, make_guidance, sample_strength
from .lidar import ColoredPointCloud, DepthMap, accumulate_and_downsample, colorize_sweep, complete_depth, render_depth
from .losses import LossReport, LossWeights, TermGrads, build_report, psnr, pseudo_loss, recon_loss, ssim
from .rasterizer import GradientBuffer, render, render_backward
from .scene_io import DatasetManifest, save_checkpoint

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

PARAM_GROUPS = ("means", "log_scales", "rotations", "opacity_logits", "sh")

# purpose tags for per-iteration seeded generators
_TAG_EPOCH = 101
_TAG_VIEWS = 102
_TAG_STRENGTH = 103
_TAG_DENSIFY = 105


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 2000
    warmup_iters: int = 500
    pseudo_cadence: int = 10  # event every k iterations
    pseudo_count: int = 4  # views per event
    lr_start: float = 1.6e-4  # position rate, decayed exponentially
    lr_end: float = 1.6e-6
    lr_scales: float = 5e-3  # fixed per-group rates
    lr_rotations: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: StrengthSchedule | None = None
    pseudo: PseudoViewConfig | None = None
    densify: DensifyConfig | None = field(default_factory=DensifyConfig)
    max_sh_degree: int = 3
    sh_degree_interval: int = 1000  # +1 band per this many iterations
    init_voxel_size: float = 0.5
    init_opacity: float = 0.1
    eval_every: int = 0  # 0 = only after the final iteration
    checkpoint_every: int = 0  # 0 = never
    deterministic: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.total_iters < 0:
            raise ConfigError(f"total_iters must be >= 0, got {self.total_iters}")
        if self.total_iters and not 0 <= self.warmup_iters < self.total_iters:
            raise ConfigError(
                f"warmup_iters must be in [0, total_iters), got {self.warmup_iters} of {self.total_iters}"
            )
        if self.pseudo_cadence < 1 or self.pseudo_count < 1:
            raise ConfigError("pseudo_cadence and pseudo_count must be >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigError(f"need 0 < lr_end <= lr_start, got {self.lr_end} > {self.lr_start}")
        for name in ("lr_scales", "lr_rotations", "lr_opacity", "lr_sh"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_sh_degree not in (0, 1, 2, 3):
            raise ConfigError(f"max_sh_degree must be 0..3, got {self.max_sh_degree}")
        if self.schedule is None:
            object.__setattr__(self, "schedule", StrengthSchedule(total_iters=max(self.total_iters, 1)))
        if self.pseudo is None:
            object.__setattr__(
                self,
                "pseudo",
                PseudoViewConfig(
                    delta_max=np.deg2rad(15.0),
                    count_per_event=self.pseudo_count,
                    cadence=self.pseudo_cadence,
                    seed=self.seed,
                ),
            )
        elif self.pseudo.count_per_event != self.pseudo_count or self.pseudo.cadence != self.pseudo_cadence:
            raise ConfigError("pseudo view config disagrees with pseudo_count/pseudo_cadence")

    def group_lrs(self, iteration: int) -> dict[str, float]:
        return {
            "means": lr_at(iteration, self),
            "log_scales": self.lr_scales,
            "rotations": self.lr_rotations,
            "opacity_logits": self.lr_opacity,
            "sh": self.lr_sh,
        }


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Exponential decay from lr_start to lr_end over the whole run."""
    if cfg.total_iters == 0:
        return cfg.lr_start
    frac = iteration / cfg.total_iters
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_update(param: np.ndarray, grad: np.ndarray, mom: AdamMoments, lr: float) -> np.ndarray:
    """One adaptive-moment step; mutates `mom`, returns the new parameter."""
    mom.step += 1
    g = np.asarray(grad, dtype=np.float64)
    mom.m = ADAM_BETA1 * mom.m + (1.0 - ADAM_BETA1) * g
    mom.v = ADAM_BETA2 * mom.v + (1.0 - ADAM_BETA2) * g * g
    m_hat = mom.m / (1.0 - ADAM_BETA1**mom.step)
    v_hat = mom.v / (1.0 - ADAM_BETA2**mom.step)
    return np.asarray(param, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class TrainState:
    """Everything the loop mutates, plus the dataset context it reads."""

    cloud: GaussianCloud
    iteration: int
    seed: int
    moments: dict[str, AdamMoments]
    train_frames: tuple
    lidar_cloud: ColoredPointCloud | None
    ndc_accum: np.ndarray  # summed NDC positional-gradient norms
    ndc_count: np.ndarray  # steps each Gaussian was visible
    events: list = field(default_factory=list)
    depth_cache: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, cloud: GaussianCloud, train_frames, lidar_cloud, seed: int):
        n = len(cloud)
        moments = {
            "means": AdamMoments.zeros((n, 3)),
            "log_scales": AdamMoments.zeros((n, 3)),
            "rotations": AdamMoments.zeros((n, 4)),
            "opacity_logits": AdamMoments.zeros(n),
            "sh": AdamMoments.zeros(cloud.sh.shape),
        }
        return cls(cloud, 0, seed, moments, tuple(train_frames), lidar_cloud, np.zeros(n), np.zeros(n))


def active_sh_degree(state: TrainState, cfg: TrainConfig) -> int:
    """View-dependence warm-up: one extra SH band per interval."""
    return min(state.iteration // cfg.sh_degree_interval, cfg.max_sh_degree, state.cloud.sh_degree)


def _frame_depth(state: TrainState, frame) -> DepthMap | None:
    """LiDAR depth target for a training frame, completed and cached."""
    if state.lidar_cloud is None or len(state.lidar_cloud) == 0:
        return None
    if frame.frame_id not in state.depth_cache:
        state.depth_cache[frame.frame_id] = _pose_depth(state, frame.view)
    return state.depth_cache[frame.frame_id]


def _pose_depth(state: TrainState, view) -> DepthMap | None:
    sparse = render_depth(state.lidar_cloud, view)
    try:
        return complete_depth(sparse)
    except NoValidPixelsError:
        return None


def _invalid_depth(shape) -> DepthMap:
    return DepthMap(np.zeros(shape), np.zeros(shape, dtype=bool))


def _apply_gradients(state: TrainState, grads: GradientBuffer, cfg: TrainConfig):
    lrs = cfg.group_lrs(state.iteration)
    cloud = state.cloud
    updates = {}
    for name in PARAM_GROUPS:
        new = adam_update(getattr(cloud, name), getattr(grads, "d_" + name), state.moments[name], lrs[name])
        updates[name] = new.astype(np.float32)
    state.cloud = GaussianCloud(**updates)
    state.ndc_accum += grads.ndc_grad_norm
    state.ndc_count += grads.seen


def train_step(state: TrainState, frame, cfg: TrainConfig) -> LossReport:
    """One reconstruction step on a training view; advances the iteration."""
    out = render(state.cloud, frame.view, sh_degree=active_sh_degree(state, cfg))
    terms = recon_loss(out, frame.image, _frame_depth(state, frame), cfg.weights)
    grads = render_backward(state.cloud, frame.view, out, terms.d_color, terms.d_depth)
    _apply_gradients(state, grads, cfg)
    state.iteration += 1
    return build_report(terms, None, cfg.weights)


def _reference_frames(state: TrainState, anchor):
    """Nearest earlier/later training frames by id; clamped at the ends."""
    ids = [f.frame_id for f in state.train_frames]
    idx = ids.index(anchor.frame_id)
    prev = state.train_frames[max(idx - 1, 0)]
    nxt = state.train_frames[min(idx + 1, len(ids) - 1)]
    return prev, nxt


def _guidance_seed(state: TrainState, view_index: int) -> int:
    return (state.seed * 1_000_003 + state.iteration * 131 + view_index) % (2**31 - 1)


def pseudo_event(state: TrainState, anchor_frame, cfg: TrainConfig, provider) -> LossReport | None:
    """Sample pseudo views around the anchor and apply one guided update.

    Refused (returning None, provider untouched) before the warm-up or off
    the cadence. With a zero pseudo weight the event is a no-op: a separate
    optimizer step would still nudge parameters through stale momentum, and
    a zero-weight event must leave the cloud untouched.
    """
    it = state.iteration
    if it < cfg.warmup_iters or it % cfg.pseudo_cadence != 0:
        return None
    if cfg.weights.lambda_pseudo == 0.0 or provider is None:
        state.events.append({"iter": it, "kind": "pseudo-skipped", "calls": 0})
        return None

    prev, nxt = _reference_frames(state, anchor_frame)
    views = sample_pseudo_views(
        anchor_frame.view,
        prev.view,
        nxt.view,
        cfg.pseudo,
        np.random.default_rng([state.seed, _TAG_VIEWS, it]),
    )
    strength_rng = np.random.default_rng([state.seed, _TAG_STRENGTH, it])
    depth_prev = _frame_depth(state, prev)
    depth_next = _frame_depth(state, nxt)
    shape = anchor_frame.image.shape[:2]

    degree = active_sh_degree(state, cfg)
    scale = cfg.weights.lambda_pseudo / len(views)
    total = GradientBuffer.zeros(len(state.cloud), state.cloud.sh.shape[1])
    reports = []
    try:
        for j, view in enumerate(views):
            strength, _ = sample_strength(cfg.schedule, it, strength_rng)
            out = render(state.cloud, view, sh_degree=degree)
            depth_target = _pose_depth(state, view) if state.lidar_cloud is not None else None
            request = GuidanceRequest(
                rendered=out.color,
                ref_prev=prev.image,
                ref_next=nxt.image,
                depth_target=depth_target if depth_target is not None else _invalid_depth(shape),
                depth_prev=depth_prev if depth_prev is not None else _invalid_depth(shape),
                depth_next=depth_next if depth_next is not None else _invalid_depth(shape),
                strength=strength,
                seed=_guidance_seed(state, j),
                request_id=f"iter{it}-view{j}",
            )
            if hasattr(provider, "set_view"):
                provider.set_view(view)
            response = make_guidance(request, provider, t_max=cfg.schedule.t_max, t_min=cfg.schedule.t_min)
            terms = pseudo_loss(out, response.guidance, depth_target, cfg.weights)
            grads = render_backward(state.cloud, view, out, scale * terms.d_color, scale * terms.d_depth)
            for name in PARAM_GROUPS:
                acc = getattr(total, "d_" + name)
                acc += getattr(grads, "d_" + name)
            np.add(total.ndc_grad_norm, grads.ndc_grad_norm, out=total.ndc_grad_norm)
            np.logical_or(total.seen, grads.seen, out=total.seen)
            reports.append(terms)
    except ProviderUnavailableError as err:
        state.events.append({"iter": it, "kind": "provider-unavailable", "calls": len(reports), "error": str(err)})
        return None

    _apply_gradients(state, total, cfg)
    mean = [float(np.mean([getattr(r, f) for r in reports])) for f in ("value", "l1", "structural", "depth")]
    terms_mean = TermGrads(mean[0], np.zeros(shape + (3,)), np.zeros(shape), mean[1], mean[2], mean[3])
    state.events.append({"iter": it, "kind": "pseudo", "calls": len(views)})
    return build_report(None, terms_mean, cfg.weights)


def _moment_surgery(state: TrainState, carry_src: np.ndarray):
    """Re-index optimizer moments after densify/prune; new rows start cold."""
    fresh = carry_src < 0
    src = np.where(fresh, 0, carry_src)
    for name, mom in state.moments.items():
        m = mom.m[src]
        v = mom.v[src]
        m[fresh] = 0.0
        v[fresh] = 0.0
        state.moments[name] = AdamMoments(m, v, mom.step)
    state.ndc_accum = np.where(fresh, 0.0, state.ndc_accum[src])
    state.ndc_count = np.where(fresh, 0.0, state.ndc_count[src])


def _maybe_densify(state: TrainState, cfg: TrainConfig, scene_extent: float):
    dc = cfg.densify
    it = state.iteration
    if dc is None or not dc.start_iter <= it <= dc.end_iter:
        return
    if it % dc.interval == 0:
        avg = state.ndc_accum / np.maximum(state.ndc_count, 1.0)
        outcome = densify_and_prune(
            state.cloud, avg, dc, scene_extent, np.random.default_rng([state.seed, _TAG_DENSIFY, it])
        )
        state.cloud = outcome.cloud
        _moment_surgery(state, outcome.carry_src)
        state.ndc_accum = np.zeros(len(state.cloud))
        state.ndc_count = np.zeros(len(state.cloud))
        state.events.append(
            {"iter": it, "kind": "densify", "cloned": outcome.n_cloned, "split": outcome.n_split, "pruned": outcome.n_pruned}
        )
    if dc.opacity_reset_interval and it % dc.opacity_reset_interval == 0:
        state.cloud = reset_opacities(state.cloud)
        mom = state.moments["opacity_logits"]
        mom.m[:] = 0.0
        mom.v[:] = 0.0
        state.events.append({"iter": it, "kind": "opacity-reset"})


def build_init_cloud(manifest: DatasetManifest, cfg: TrainConfig):
    """LiDAR-seeded initialization: colorize sweeps, voxel-merge, lift.

    Returns (cloud, merged point cloud); the latter also serves as the
    depth-supervision geometry.
    """
    colored = [colorize_sweep(f.lidar, f) for f in manifest.train_frames() if f.lidar is not None and len(f.lidar)]
    if not colored:
        raise ConfigError("no LiDAR sweeps available to initialize from")
    merged = accumulate_and_downsample(colored, cfg.init_voxel_size)
    cloud = init_from_points(merged, opacity0=cfg.init_opacity, sh_degree=cfg.max_sh_degree)
    return cloud, merged


def evaluate_split(cloud: GaussianCloud, frames, sh_degree: int | None = None):
    """Per-frame PSNR/SSIM of renders against photographs."""
    rows = []
    for f in frames:
        out = render(cloud, f.view, sh_degree=sh_degree)
        rows.append({"frame_id": f.frame_id, "psnr": psnr(out.color, f.image), "ssim": ssim(out.color, f.image)})
    return rows


def _scene_extent(frames) -> float:
    centers = np.stack([f.view.pose.t for f in frames])
    span = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    return max(float(span) * 1.1, 1.0)


@dataclass
class TrainResult:
    cloud: GaussianCloud
    steps: list  # one dict per iteration: losses, lr, count
    evals: list  # held-out metrics at eval points
    events: list


MOMENT_SIDECAR_SUFFIX = ".moments.npz"


def save_train_state(state: TrainState, path):
    """Checkpoint plus an optimizer sidecar so training can resume exactly."""
    path = Path(path)
    save_checkpoint(state.cloud, state.iteration, path)
    arrays = {"ndc_accum": state.ndc_accum, "ndc_count": state.ndc_count}
    for name, mom in state.moments.items():
        arrays["m_" + name] = mom.m
        arrays["v_" + name] = mom.v
        arrays["step_" + name] = np.int64(mom.step)
    with open(str(path) + MOMENT_SIDECAR_SUFFIX, "wb") as fh:
        np.savez(fh, **arrays)
    (Path(str(path) + ".events.json")).write_text(json.dumps(state.events))


def load_train_state(path, train_frames, lidar_cloud, seed: int) -> TrainState:
    from .scene_io import load_checkpoint

    path = Path(path)
    cloud, iteration = load_checkpoint(path)
    with np.load(str(path) + MOMENT_SIDECAR_SUFFIX, allow_pickle=False) as data:
        moments = {
            name: AdamMoments(data["m_" + name].copy(), data["v_" + name].copy(), int(data["step_" + name]))
            for name in PARAM_GROUPS
        }
        ndc_accum = data["ndc_accum"].copy()
        ndc_count = data["ndc_count"].copy()
    state = TrainState(cloud, iteration, seed, moments, tuple(train_frames), lidar_cloud, ndc_accum, ndc_count)
    events_path = Path(str(path) + ".events.json")
    if events_path.exists():
        state.events = json.loads(events_path.read_text())
    return state


def train(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    provider=None,
    init_cloud: GaussianCloud | None = None,
    checkpoint_dir=None,
    resume_from=None,
    log=None,
) -> TrainResult:
    """Run the full optimization; returns the cloud and metrics history.

    Any exception after setup checkpoints the current state (when a
    checkpoint directory is given) before propagating.
    """
    train_frames = manifest.train_frames()
    if not train_frames:
        raise ConfigError("manifest has no training frames")
    lidar_cloud = None
    if init_cloud is None or any(f.lidar is not None for f in train_frames):
        try:
            built, lidar_cloud = build_init_cloud(manifest, cfg)
        except ConfigError:
            built = None
        if init_cloud is None:
            if built is None:
                raise ConfigError("no initialization cloud and no LiDAR to build one")
            init_cloud = built

    if resume_from is not None:
        state = load_train_state(resume_from, train_frames, lidar_cloud, cfg.seed)
    else:
        state = TrainState.initialize(init_cloud, train_frames, lidar_cloud, cfg.seed)
    if cfg.total_iters == 0:
        return TrainResult(state.cloud, [], [], state.events)

    extent = _scene_extent(train_frames)
    n = len(train_frames)
    steps: list[dict] = []
    evals: list[dict] = []
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    try:
        order = None
        for it in range(state.iteration, cfg.total_iters):
            if it % n == 0 or order is None:
                order = np.random.default_rng([cfg.seed, _TAG_EPOCH, it // n]).permutation(n)
            frame = train_frames[order[it % n]]

            event_report = None
            if provider is not None and it >= cfg.warmup_iters and it % cfg.pseudo_cadence == 0:
                event_report = pseudo_event(state, frame, cfg, provider)

            report = train_step(state, frame, cfg)
            row = {
                "iter": it,
                "lr": lr_at(it, cfg),
                "n_gaussians": len(state.cloud),
                **{k: getattr(report, k) for k in report.__dataclass_fields__},
            }
            if event_report is not None:
                row["pseudo_l1"] = event_report.pseudo_l1
                row["pseudo_perceptual"] = event_report.pseudo_perceptual
                row["pseudo_depth"] = event_report.pseudo_depth
                row["total"] = report.total + event_report.total
            steps.append(row)
            if log is not None:
                log(row)

            _maybe_densify(state, cfg, extent)

            done = state.iteration == cfg.total_iters
            due = (cfg.eval_every > 0 and state.iteration % cfg.eval_every == 0) or done
            if due:
                test_frames = manifest.test_frames()
                if test_frames:
                    rows = evaluate_split(state.cloud, test_frames, active_sh_degree(state, cfg))
                    evals.append(
                        {
                            "iter": state.iteration,
                            "psnr": float(np.mean([r["psnr"] for r in rows])),
                            "ssim": float(np.mean([r["ssim"] for r in rows])),
                        }
                    )
            if checkpoint_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                save_train_state(state, checkpoint_dir / f"ckpt_{state.iteration:06d}.sgdc")
    except BaseException:
        if checkpoint_dir is not None:
            save_train_state(state, checkpoint_dir / "emergency.sgdc")
        raise

    return TrainResult(state.cloud, steps, evals, state.events)

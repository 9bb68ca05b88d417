"""Command-line entry points.

Subcommands cover the whole pipeline: generating synthetic datasets,
ingesting LiDAR into an initialization cloud, training, rendering,
evaluation, pseudo-view inspection, probing a remote guidance service,
and serving the HTTP API. Commands run in process by default; `render`,
`eval` and `sample-views` also accept --server to act as thin clients of
a running `serve` instance.
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import StreetSplatError
from .gaussians import DensifyConfig, write_ply
from .geometry import CameraView, Intrinsics, Pose, PseudoViewConfig, sample_pseudo_views, project_points, yaw_offset
from .guidance import (
    GuidanceRequest,
    IdentityProvider,
    OracleProvider,
    RemoteProvider,
    StrengthSchedule,
    ToyProvider,
    make_guidance,
)
from .lidar import DepthMap, PointSweep, accumulate_and_downsample, colorize_sweep
from .losses import LossWeights, perceptual_distance
from .rasterizer import render
from .scene_io import (
    load_checkpoint,
    load_config,
    load_dataset,
    make_split,
    save_checkpoint,
    save_point_cloud,
)
from .synthetic import GT_CLOUD_FILENAME, synthesize_scene
from .trainer import TrainConfig, evaluate_split, train

HISTORY_COLUMNS = (
    "iter",
    "lr",
    "total",
    "recon_l1",
    "recon_ssim",
    "recon_depth",
    "pseudo_l1",
    "pseudo_perceptual",
    "pseudo_depth",
    "n_gaussians",
)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def cmd_make_synth(args) -> int:
    root, cloud = synthesize_scene(
        args.out,
        width=args.width,
        height=args.height,
        n_train=args.n_train,
        n_test=args.n_test,
        seed=args.seed,
        length=args.length,
    )
    print(f"wrote {args.n_train + args.n_test} frames to {root} ({len(cloud)} ground-truth gaussians)")
    return 0


def _masked_sweep(sweep: PointSweep, view: CameraView, top_rows: int) -> PointSweep:
    """Drop points whose projection lands in the masked top image rows."""
    if top_rows <= 0:
        return sweep
    uv, _, in_front = project_points(view, sweep.points)
    rows = np.round(uv[:, 1])
    keep = in_front & (rows >= top_rows)
    return PointSweep(sweep.points[keep], sweep.source_frame)


def cmd_ingest(args) -> int:
    ds = load_dataset(args.data_root)
    clouds = []
    for frame in ds.train_frames():
        if frame.lidar is None or len(frame.lidar) == 0:
            continue
        sweep = _masked_sweep(frame.lidar, frame.view, args.top_mask)
        if len(sweep) == 0:
            continue
        clouds.append(colorize_sweep(sweep, frame))
    if not clouds:
        return _fail("no usable LiDAR points in the training split")
    merged = accumulate_and_downsample(clouds, args.voxel_size)
    out = Path(args.out) if args.out else Path(args.data_root) / "init_cloud.sgpc"
    save_point_cloud(merged, out)
    print(f"wrote {len(merged)} points to {out} (voxel {args.voxel_size} m, top mask {args.top_mask} rows)")
    return 0


_CONFIG_INT_KEYS = {
    "total_iters",
    "warmup_iters",
    "pseudo_cadence",
    "pseudo_count",
    "max_sh_degree",
    "sh_degree_interval",
    "eval_every",
    "checkpoint_every",
    "seed",
    "t_max",
    "t_min",
    "densify_interval",
    "densify_start",
    "densify_end",
    "opacity_reset_interval",
    "split_seed",
}
_CONFIG_FLOAT_KEYS = {
    "lr_start",
    "lr_end",
    "lr_scales",
    "lr_rotations",
    "lr_opacity",
    "lr_sh",
    "init_voxel_size",
    "init_opacity",
    "lambda_ssim",
    "lambda_depth",
    "lambda_pseudo",
    "lambda_p_lpips",
    "lambda_p_depth",
    "delta_max_deg",
    "s_min",
    "s_max_start",
    "s_max_end",
    "densify_grad_threshold",
    "split_drop_rate",
}
_CONFIG_BOOL_KEYS = {"deterministic", "densify"}
_CONFIG_STR_KEYS = {"split_scheme"}


def parse_train_config(mapping: dict[str, str], **overrides) -> tuple[TrainConfig, dict]:
    """Build a TrainConfig from flat key=value text; returns leftovers too.

    Split-related keys (split_scheme, split_drop_rate, split_seed) are
    returned separately for the dataset loader. Keyword overrides win
    over the file; None overrides are ignored.
    """
    values: dict = {}
    split: dict = {}
    for key, raw in mapping.items():
        if key in _CONFIG_INT_KEYS:
            value: object = int(raw)
        elif key in _CONFIG_FLOAT_KEYS:
            value = float(raw)
        elif key in _CONFIG_BOOL_KEYS:
            value = raw.strip().lower() in ("1", "true", "yes", "on")
        elif key in _CONFIG_STR_KEYS:
            value = raw.strip()
        else:
            raise StreetSplatError(f"unknown config key: {key}")
        if key.startswith("split_"):
            split[key] = value
        else:
            values[key] = value
    values.update({k: v for k, v in overrides.items() if v is not None})

    weights_kwargs = {k: values.pop(k) for k in list(values) if k.startswith("lambda_")}
    schedule_kwargs = {k: values.pop(k) for k in list(values) if k in ("s_min", "s_max_start", "s_max_end", "t_max", "t_min")}
    densify_kwargs = {}
    for src, dst in (
        ("densify_interval", "interval"),
        ("densify_start", "start_iter"),
        ("densify_end", "end_iter"),
        ("densify_grad_threshold", "grad_threshold"),
        ("opacity_reset_interval", "opacity_reset_interval"),
    ):
        if src in values:
            densify_kwargs[dst] = values.pop(src)
    densify_on = values.pop("densify", True)
    delta_deg = values.pop("delta_max_deg", None)

    kwargs: dict = dict(values)
    if weights_kwargs:
        kwargs["weights"] = LossWeights(**weights_kwargs)
    if schedule_kwargs:
        total = kwargs.get("total_iters", TrainConfig.total_iters)
        kwargs["schedule"] = StrengthSchedule(total_iters=max(total, 1), **schedule_kwargs)
    kwargs["densify"] = DensifyConfig(**densify_kwargs) if densify_on else None
    cfg = TrainConfig(**kwargs)
    if delta_deg is not None:
        kwargs["pseudo"] = PseudoViewConfig(
            delta_max=float(np.deg2rad(delta_deg)),
            count_per_event=cfg.pseudo_count,
            cadence=cfg.pseudo_cadence,
            seed=cfg.seed,
        )
        cfg = TrainConfig(**kwargs)
    return cfg, split


def build_provider(spec: str, data_root, schedule: StrengthSchedule, gt_cloud_path=None):
    if spec == "identity":
        return IdentityProvider()
    if spec == "toy":
        return ToyProvider(t_max=schedule.t_max)
    if spec == "oracle":
        path = Path(gt_cloud_path) if gt_cloud_path else Path(data_root) / GT_CLOUD_FILENAME
        cloud, _ = load_checkpoint(path)
        return OracleProvider(lambda view: render(cloud, view).color)
    if spec.startswith("remote:"):
        return RemoteProvider(spec.split(":", 1)[1], t_max=schedule.t_max)
    raise StreetSplatError(f"unknown provider: {spec} (use identity|toy|oracle|remote:HOST:PORT)")


def _write_delimited(path, columns, rows):
    with open(path, "w") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(str(row.get(c, "")) for c in columns) + "\n")


def cmd_train(args) -> int:
    mapping = load_config(args.config) if args.config else {}
    cfg, split_cfg = parse_train_config(
        mapping,
        seed=args.seed,
        deterministic=True if args.deterministic else None,
    )

    split = None
    if split_cfg:
        ds_probe = load_dataset(args.data_root)
        split = make_split(
            len(ds_probe.frames),
            split_cfg.get("split_drop_rate", 0.5),
            scheme=split_cfg.get("split_scheme", "alternating"),
            seed=split_cfg.get("split_seed"),
        )
    ds = load_dataset(args.data_root, split=split)

    provider = build_provider(args.provider, args.data_root, cfg.schedule, args.gt_cloud)
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.data_root) / "run"
    out_dir.mkdir(parents=True, exist_ok=True)

    def log(row):
        if args.log_every and row["iter"] % args.log_every == 0:
            print(
                "iter {iter} lr {lr:.4e} total {total:.6f} recon_l1 {recon_l1:.6f} "
                "recon_ssim {recon_ssim:.6f} recon_depth {recon_depth:.6f} "
                "pseudo_l1 {pseudo_l1:.6f} pseudo_perceptual {pseudo_perceptual:.6f} "
                "pseudo_depth {pseudo_depth:.6f} gaussians {n_gaussians}".format(**row)
            )

    result = train(
        ds,
        cfg,
        provider=provider,
        checkpoint_dir=out_dir / "checkpoints",
        resume_from=args.resume,
        log=log,
    )
    save_checkpoint(result.cloud, cfg.total_iters, out_dir / "final.sgdc")
    _write_delimited(out_dir / "history.tsv", HISTORY_COLUMNS, result.steps)
    _write_delimited(out_dir / "evals.tsv", ("iter", "psnr", "ssim"), result.evals)
    (out_dir / "events.json").write_text(json.dumps(result.events, indent=0))
    if result.evals:
        last = result.evals[-1]
        print(f"final: {len(result.cloud)} gaussians, held-out psnr {last['psnr']:.3f} dB ssim {last['ssim']:.4f}")
    print(f"run artifacts in {out_dir}")
    return 0


def _parse_floats(text: str, expect: int, what: str):
    parts = text.replace(",", " ").split()
    if len(parts) != expect:
        raise StreetSplatError(f"{what} needs {expect} numbers, got {len(parts)}")
    return [float(p) for p in parts]


def _view_from_args(args) -> CameraView:
    if args.data_root and args.frame is not None:
        ds = load_dataset(args.data_root)
        try:
            frame = ds.frame_by_id(args.frame)
        except KeyError as err:
            raise StreetSplatError(str(err)) from err
        return frame.view
    if not args.pose or not args.intrinsics:
        raise StreetSplatError("provide either --data-root with --frame, or --pose with --intrinsics")
    row = _parse_floats(args.pose, 12, "--pose")
    mat = np.array(row, dtype=np.float64).reshape(3, 4)
    pose = Pose.from_matrix(mat[:, :3], mat[:, 3])
    fx, fy, cx, cy, w, h = _parse_floats(args.intrinsics, 6, "--intrinsics")
    return CameraView(Intrinsics(fx, fy, cx, cy, int(w), int(h)), pose)


def _save_png(color: np.ndarray, path):
    img = (np.clip(color, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(img).save(path)


def cmd_render(args) -> int:
    if args.server:
        return _render_via_server(args)
    cloud, _ = load_checkpoint(args.checkpoint)
    view = _view_from_args(args)
    out = render(cloud, view, sh_degree=args.sh_degree)
    _save_png(out.color, args.out)
    print(f"wrote {args.out}")
    if args.depth_out:
        np.save(args.depth_out, out.depth)
        print(f"wrote {args.depth_out}")
    if args.ply_out:
        write_ply(cloud, args.ply_out)
        print(f"wrote {args.ply_out}")
    return 0


def _render_via_server(args) -> int:
    import httpx

    payload = {"checkpoint": str(args.checkpoint), "sh_degree": args.sh_degree}
    if args.data_root and args.frame is not None:
        payload.update(data_root=str(args.data_root), frame=args.frame)
    elif args.pose and args.intrinsics:
        payload.update(pose=_parse_floats(args.pose, 12, "--pose"), intrinsics=_parse_floats(args.intrinsics, 6, "--intrinsics"))
    else:
        raise StreetSplatError("provide either --data-root with --frame, or --pose with --intrinsics")
    reply = httpx.post(args.server.rstrip("/") + "/render", json=payload, timeout=120.0)
    reply.raise_for_status()
    body = reply.json()
    Path(args.out).write_bytes(base64.b64decode(body["png_base64"]))
    print(f"wrote {args.out} (server {args.server})")
    return 0


def _metric_rows(cloud, frames, sh_degree):
    rows = evaluate_split(cloud, frames, sh_degree)
    for row, frame in zip(rows, frames):
        out = render(cloud, frame.view, sh_degree=sh_degree)
        row["perceptual_proxy"] = float(perceptual_distance(out.color, frame.image)[0])
    return rows


def _print_metric_table(rows):
    header = f"{'frame':>6} {'psnr_db':>9} {'ssim':>7} {'perceptual_proxy':>17}"
    print(header)
    for r in rows:
        print(f"{r['frame_id']:>6} {r['psnr']:>9.3f} {r['ssim']:>7.4f} {r['perceptual_proxy']:>17.6f}")
    n = max(len(rows), 1)
    mean = {k: sum(r[k] for r in rows) / n for k in ("psnr", "ssim", "perceptual_proxy")}
    print(f"{'mean':>6} {mean['psnr']:>9.3f} {mean['ssim']:>7.4f} {mean['perceptual_proxy']:>17.6f}")


def cmd_eval(args) -> int:
    if args.server:
        return _eval_via_server(args)
    cloud, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data_root)
    frames = ds.test_frames() if args.split == "test" else ds.train_frames()
    if not frames:
        return _fail(f"no frames in the {args.split} split")
    rows = _metric_rows(cloud, frames, args.sh_degree)
    _print_metric_table(rows)
    if args.tsv:
        _write_delimited(args.tsv, ("frame_id", "psnr", "ssim", "perceptual_proxy"), rows)
        print(f"wrote {args.tsv}")
    return 0


def _eval_via_server(args) -> int:
    import httpx

    payload = {
        "checkpoint": str(args.checkpoint),
        "data_root": str(args.data_root),
        "split": args.split,
        "sh_degree": args.sh_degree,
    }
    reply = httpx.post(args.server.rstrip("/") + "/eval", json=payload, timeout=300.0)
    reply.raise_for_status()
    rows = reply.json()["rows"]
    _print_metric_table(rows)
    if args.tsv:
        _write_delimited(args.tsv, ("frame_id", "psnr", "ssim", "perceptual_proxy"), rows)
        print(f"wrote {args.tsv}")
    return 0


def _pose_row(pose: Pose) -> str:
    R = pose.rotmat()
    return " ".join(f"{v:.9f}" for v in np.concatenate([R, pose.t[:, None]], axis=1).ravel())


def cmd_sample_views(args) -> int:
    if args.server:
        return _sample_views_via_server(args)
    ds = load_dataset(args.data_root)
    train_frames = ds.train_frames()
    ids = [f.frame_id for f in train_frames]
    if args.anchor not in ids:
        return _fail(f"frame {args.anchor} is not in the training split")
    idx = ids.index(args.anchor)
    anchor = train_frames[idx]
    prev = train_frames[max(idx - 1, 0)]
    nxt = train_frames[min(idx + 1, len(ids) - 1)]
    cfg = PseudoViewConfig(
        delta_max=float(np.deg2rad(args.delta)), count_per_event=args.count, cadence=1, seed=args.seed
    )
    views = sample_pseudo_views(anchor.view, prev.view, nxt.view, cfg, np.random.default_rng(args.seed))
    for j, view in enumerate(views):
        yaw = np.rad2deg(yaw_offset(anchor.view.pose, view.pose))
        print(f"{j} {_pose_row(view.pose)} yaw_deg {yaw:.4f}")
    return 0


def _sample_views_via_server(args) -> int:
    import httpx

    payload = {
        "data_root": str(args.data_root),
        "anchor": args.anchor,
        "delta_deg": args.delta,
        "count": args.count,
        "seed": args.seed,
    }
    reply = httpx.post(args.server.rstrip("/") + "/sample-views", json=payload, timeout=60.0)
    reply.raise_for_status()
    for row in reply.json()["views"]:
        print(f"{row['index']} {' '.join(f'{v:.9f}' for v in row['pose'])} yaw_deg {row['yaw_deg']:.4f}")
    return 0


def _probe_request(width: int, height: int, strength: float, seed: int) -> GuidanceRequest:
    """A deterministic synthetic scene for exercising a provider."""
    yy, xx = np.mgrid[0:height, 0:width]
    base = np.stack([xx / max(width - 1, 1), yy / max(height - 1, 1), np.full_like(xx, 0.5, dtype=np.float64)], axis=2)
    depth = DepthMap(np.full((height, width), 5.0), np.ones((height, width), dtype=bool))
    return GuidanceRequest(
        rendered=base,
        ref_prev=np.clip(base * 0.9, 0.0, 1.0),
        ref_next=np.clip(base * 1.1, 0.0, 1.0),
        depth_target=depth,
        depth_prev=depth,
        depth_next=depth,
        strength=strength,
        seed=seed,
        request_id="probe-0",
    )


def cmd_guidance_probe(args) -> int:
    provider = RemoteProvider(args.address, timeout=args.timeout)
    request = _probe_request(args.width, args.height, args.strength, args.seed)
    response = make_guidance(request, provider)
    guidance = response.guidance
    if guidance.shape != request.rendered.shape:
        return _fail(f"guidance shape {guidance.shape} != request {request.rendered.shape}")
    if not np.all(np.isfinite(guidance)):
        return _fail("guidance contains non-finite values")
    if guidance.min() < 0.0 or guidance.max() > 1.0:
        return _fail("guidance leaves [0, 1]")
    print(
        f"probe ok: provider {response.provider_id}, noise level {response.noise_level_used}, "
        f"{guidance.shape[1]}x{guidance.shape[0]} px"
    )
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streetsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synth", help="generate a procedural street dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--n-train", type=int, default=20)
    p.add_argument("--n-test", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--length", type=float, default=36.0)
    p.set_defaults(fn=cmd_make_synth)

    p = sub.add_parser("ingest", help="accumulate colorized LiDAR into an initialization cloud")
    p.add_argument("--data-root", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--voxel-size", type=float, default=0.5)
    p.add_argument("--top-mask", type=int, default=80, help="invalidate this many top image rows")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train", help="optimize a Gaussian cloud on a dataset")
    p.add_argument("--data-root", required=True)
    p.add_argument("--config", default=None, help="key=value file of training settings")
    p.add_argument("--provider", default="identity", help="identity|toy|oracle|remote:HOST:PORT")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--gt-cloud", default=None, help="ground-truth checkpoint for the oracle provider")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint from a camera pose")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pose", default=None, help="12 numbers: row-major 3x4 camera-to-world")
    p.add_argument("--intrinsics", default=None, help="fx fy cx cy width height")
    p.add_argument("--data-root", default=None)
    p.add_argument("--frame", type=int, default=None, help="take pose+intrinsics from this dataset frame")
    p.add_argument("--sh-degree", type=int, default=None)
    p.add_argument("--depth-out", default=None)
    p.add_argument("--ply-out", default=None)
    p.add_argument("--server", default=None, help="route through a serve instance at this URL")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="metrics table against a dataset split")
    p.add_argument("--data-root", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--sh-degree", type=int, default=None)
    p.add_argument("--tsv", default=None, help="also write machine-readable delimited output here")
    p.add_argument("--server", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sample-views", help="print pseudo views sampled around an anchor frame")
    p.add_argument("--data-root", required=True)
    p.add_argument("--anchor", type=int, required=True)
    p.add_argument("--delta", type=float, required=True, help="yaw bound in degrees")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--server", default=None)
    p.set_defaults(fn=cmd_sample_views)

    p = sub.add_parser("guidance-probe", help="send one synthetic request to a guidance service")
    p.add_argument("--address", required=True, help="HOST:PORT of the wire-protocol service")
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--height", type=int, default=12)
    p.add_argument("--strength", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timeout", type=float, default=10.0)
    p.set_defaults(fn=cmd_guidance_probe)

    p = sub.add_parser("serve", help="HTTP API wrapping render/eval/sample-views")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StreetSplatError as err:
        return _fail(str(err))


if __name__ == "__main__":
    sys.exit(main())

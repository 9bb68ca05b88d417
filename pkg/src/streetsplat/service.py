"""HTTP API over the core package.

FastAPI application exposing render, eval, and pseudo-view sampling so
other tools can drive a trained model without linking against Python.
The CLI's --server flag is a thin client of these endpoints. State is
a small LRU of loaded checkpoints and datasets keyed by path.
"""

from __future__ import annotations

import base64
import io
from collections import OrderedDict
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel, Field

from .errors import StreetSplatError
from .geometry import CameraView, Intrinsics, Pose, PseudoViewConfig, sample_pseudo_views, yaw_offset
from .losses import perceptual_distance
from .rasterizer import render
from .scene_io import load_checkpoint, load_dataset
from .trainer import evaluate_split

_CACHE_SLOTS = 4


class _PathCache:
    """Tiny LRU keyed by resolved path + mtime so edits invalidate."""

    def __init__(self, loader, slots: int = _CACHE_SLOTS):
        self._loader = loader
        self._slots = slots
        self._entries: OrderedDict = OrderedDict()

    def get(self, path: str):
        resolved = Path(path).resolve()
        try:
            stamp = resolved.stat().st_mtime_ns
        except OSError as err:
            raise HTTPException(status_code=404, detail=f"not found: {path}") from err
        key = (str(resolved), stamp)
        if key in self._entries:
            self._entries.move_to_end(key)
            return self._entries[key]
        value = self._loader(resolved)
        self._entries[key] = value
        while len(self._entries) > self._slots:
            self._entries.popitem(last=False)
        return value


class RenderRequest(BaseModel):
    checkpoint: str
    pose: list[float] | None = Field(default=None, description="12 numbers, row-major 3x4 camera-to-world")
    intrinsics: list[float] | None = Field(default=None, description="fx fy cx cy width height")
    data_root: str | None = None
    frame: int | None = None
    sh_degree: int | None = None


class RenderResponse(BaseModel):
    png_base64: str
    width: int
    height: int
    n_gaussians: int


class EvalRequest(BaseModel):
    checkpoint: str
    data_root: str
    split: str = "test"
    sh_degree: int | None = None


class EvalRow(BaseModel):
    frame_id: int
    psnr: float
    ssim: float
    perceptual_proxy: float


class EvalResponse(BaseModel):
    rows: list[EvalRow]
    mean_psnr: float
    mean_ssim: float


class SampleViewsRequest(BaseModel):
    data_root: str
    anchor: int
    delta_deg: float
    count: int = Field(default=4, ge=1)
    seed: int = 0


class SampledView(BaseModel):
    index: int
    pose: list[float]
    yaw_deg: float


class SampleViewsResponse(BaseModel):
    views: list[SampledView]


def _encode_png(color: np.ndarray) -> str:
    img = (np.clip(color, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app() -> FastAPI:
    app = FastAPI(title="streetsplat", version="0.1.0")
    checkpoints = _PathCache(lambda p: load_checkpoint(p)[0])
    datasets = _PathCache(load_dataset)

    def _bad_request(err: Exception) -> HTTPException:
        return HTTPException(status_code=400, detail=str(err))

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/render", response_model=RenderResponse)
    def render_endpoint(req: RenderRequest):
        cloud = checkpoints.get(req.checkpoint)
        try:
            if req.data_root is not None and req.frame is not None:
                try:
                    view = datasets.get(req.data_root).frame_by_id(req.frame).view
                except KeyError as err:
                    raise StreetSplatError(str(err)) from err
            elif req.pose is not None and req.intrinsics is not None:
                if len(req.pose) != 12 or len(req.intrinsics) != 6:
                    raise StreetSplatError("pose needs 12 numbers and intrinsics 6")
                mat = np.array(req.pose, dtype=np.float64).reshape(3, 4)
                fx, fy, cx, cy, w, h = req.intrinsics
                view = CameraView(
                    Intrinsics(fx, fy, cx, cy, int(w), int(h)),
                    Pose.from_matrix(mat[:, :3], mat[:, 3]),
                )
            else:
                raise StreetSplatError("provide data_root+frame or pose+intrinsics")
            out = render(cloud, view, sh_degree=req.sh_degree)
        except StreetSplatError as err:
            raise _bad_request(err) from err
        return RenderResponse(
            png_base64=_encode_png(out.color),
            width=view.intrinsics.width,
            height=view.intrinsics.height,
            n_gaussians=len(cloud),
        )

    @app.post("/eval", response_model=EvalResponse)
    def eval_endpoint(req: EvalRequest):
        cloud = checkpoints.get(req.checkpoint)
        ds = datasets.get(req.data_root)
        frames = ds.test_frames() if req.split == "test" else ds.train_frames()
        if not frames:
            raise _bad_request(StreetSplatError(f"no frames in the {req.split} split"))
        try:
            rows = evaluate_split(cloud, frames, req.sh_degree)
            for row, frame in zip(rows, frames):
                out = render(cloud, frame.view, sh_degree=req.sh_degree)
                row["perceptual_proxy"] = float(perceptual_distance(out.color, frame.image)[0])
        except StreetSplatError as err:
            raise _bad_request(err) from err
        n = len(rows)
        return EvalResponse(
            rows=[EvalRow(**row) for row in rows],
            mean_psnr=sum(r["psnr"] for r in rows) / n,
            mean_ssim=sum(r["ssim"] for r in rows) / n,
        )

    @app.post("/sample-views", response_model=SampleViewsResponse)
    def sample_views_endpoint(req: SampleViewsRequest):
        ds = datasets.get(req.data_root)
        train_frames = ds.train_frames()
        ids = [f.frame_id for f in train_frames]
        if req.anchor not in ids:
            raise _bad_request(StreetSplatError(f"frame {req.anchor} is not in the training split"))
        idx = ids.index(req.anchor)
        anchor = train_frames[idx]
        prev = train_frames[max(idx - 1, 0)]
        nxt = train_frames[min(idx + 1, len(ids) - 1)]
        cfg = PseudoViewConfig(
            delta_max=float(np.deg2rad(req.delta_deg)),
            count_per_event=req.count,
            cadence=1,
            seed=req.seed,
        )
        views = sample_pseudo_views(
            anchor.view, prev.view, nxt.view, cfg, np.random.default_rng(req.seed)
        )
        rows = []
        for j, view in enumerate(views):
            R = view.pose.rotmat()
            flat = np.concatenate([R, view.pose.t[:, None]], axis=1).ravel()
            rows.append(
                SampledView(
                    index=j,
                    pose=[float(v) for v in flat],
                    yaw_deg=float(np.rad2deg(yaw_offset(anchor.view.pose, view.pose))),
                )
            )
        return SampleViewsResponse(views=rows)

    return app

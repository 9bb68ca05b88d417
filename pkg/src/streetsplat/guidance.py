"""Pseudo-view guidance: strength scheduling, noise injection and the
provider abstraction.

A pseudo view has no photograph, so its render is degraded with seeded
Gaussian noise at a scheduled level t and handed to a guidance provider,
which returns a cleaned-up image used as the supervision target. Providers
range from the identity (testing) through a deterministic toy blend to a
remote denoising service reached over the wire protocol.
"""

from __future__ import annotations

import socket
from dataclasses import dataclass

import numpy as np

from . import wire
from .errors import (
    ConfigError,
    ProtocolError,
    ProviderTimeoutError,
    ProviderUnavailableError,
    ShapeMismatchError,
)
from .lidar import DepthMap


@dataclass(frozen=True)
class StrengthSchedule:
    """Annealed noise strength: s ~ U[s_min, s_max(iter)] with s_max
    sliding linearly from s_max_start down to s_max_end over the run."""

    s_min: float = 0.2
    s_max_start: float = 0.6
    s_max_end: float = 0.4
    t_max: int = 10
    t_min: int = 0
    total_iters: int = 1

    def __post_init__(self):
        if not 0.0 <= self.s_min <= self.s_max_end <= self.s_max_start <= 1.0:
            raise ConfigError(
                f"need 0 <= s_min <= s_max_end <= s_max_start <= 1, got "
                f"{self.s_min}, {self.s_max_end}, {self.s_max_start}"
            )
        if self.t_min > self.t_max:
            raise ConfigError(f"t_min {self.t_min} exceeds t_max {self.t_max}")
        if self.total_iters < 1:
            raise ConfigError("total_iters must be positive")

    def s_max_at(self, iteration: int) -> float:
        frac = min(max(iteration / self.total_iters, 0.0), 1.0)
        return self.s_max_start + frac * (self.s_max_end - self.s_max_start)


def sample_strength(sched: StrengthSchedule, iteration: int, rng: np.random.Generator):
    """Draw (strength, noise level) for one pseudo view at this iteration."""
    hi = sched.s_max_at(iteration)
    s = sched.s_min + rng.random() * (hi - sched.s_min)
    t = int(np.rint(s * sched.t_max))
    t = min(max(t, sched.t_min), sched.t_max)
    return s, t


@dataclass(frozen=True)
class GuidanceRequest:
    rendered: np.ndarray  # (H, W, 3) pseudo-view render
    ref_prev: np.ndarray  # nearest earlier training photograph
    ref_next: np.ndarray  # nearest later training photograph
    depth_target: DepthMap
    depth_prev: DepthMap
    depth_next: DepthMap
    strength: float
    seed: int
    request_id: str = "req-0"

    def __post_init__(self):
        shape = self.rendered.shape
        if len(shape) != 3 or shape[2] != 3:
            raise ShapeMismatchError(f"rendered must be (H, W, 3), got {shape}")
        for name in ("ref_prev", "ref_next"):
            if getattr(self, name).shape != shape:
                raise ShapeMismatchError(f"{name} shape {getattr(self, name).shape} != rendered {shape}")
        for name in ("depth_target", "depth_prev", "depth_next"):
            if getattr(self, name).values.shape != shape[:2]:
                raise ShapeMismatchError(f"{name} shape {getattr(self, name).values.shape} != {shape[:2]}")
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigError(f"strength must be in [0, 1], got {self.strength}")


@dataclass(frozen=True)
class GuidanceResponse:
    guidance: np.ndarray  # (H, W, 3) in [0, 1]
    provider_id: str
    noise_level_used: int


class GuidanceProvider:
    """Contract: denoise(noisy, t, refs, depths, seed) -> image in [0, 1],
    deterministic for fixed inputs and seed."""

    provider_id = "abstract"

    def denoise(self, noisy, t, refs, depths, seed):  # pragma: no cover - interface
        raise NotImplementedError


class IdentityProvider(GuidanceProvider):
    """Returns its input unchanged; the do-nothing reference provider."""

    provider_id = "identity"

    def denoise(self, noisy, t, refs, depths, seed):
        return noisy


class ToyProvider(GuidanceProvider):
    """Blends the noisy render with a depth-aware smoothing of the
    reference frames: weight w(t) = t / t_max on the smoothed references,
    so full noise yields pure references and t = 0 passes the render
    through untouched."""

    provider_id = "toy"

    def __init__(self, t_max: int = 10, depth_sigma: float = 0.5):
        self.t_max = t_max
        self.depth_sigma = depth_sigma

    def _smooth(self, img, depth: DepthMap):
        # 3x3 average whose neighbor weights collapse across depth edges
        h, w, _ = img.shape
        vals = np.where(depth.valid, depth.values, 0.0)
        acc = np.zeros_like(img)
        norm = np.zeros((h, w))
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ys = slice(max(dy, 0), h + min(dy, 0))
                xs = slice(max(dx, 0), w + min(dx, 0))
                yd = slice(max(-dy, 0), h + min(-dy, 0))
                xd = slice(max(-dx, 0), w + min(-dx, 0))
                both_valid = depth.valid[yd, xd] & depth.valid[ys, xs]
                gap = np.abs(vals[yd, xd] - vals[ys, xs])
                weight = np.where(both_valid, np.exp(-0.5 * (gap / self.depth_sigma) ** 2), 1.0)
                acc[yd, xd] += weight[:, :, None] * img[ys, xs]
                norm[yd, xd] += weight
        return acc / norm[:, :, None]

    def denoise(self, noisy, t, refs, depths, seed):
        ref_prev, ref_next = refs
        depth_target = depths[0]
        base = 0.5 * (np.asarray(ref_prev, dtype=np.float64) + np.asarray(ref_next, dtype=np.float64))
        smoothed = self._smooth(base, depth_target)
        w = t / self.t_max
        return np.clip(w * smoothed + (1.0 - w) * noisy, 0.0, 1.0)


class OracleProvider(GuidanceProvider):
    """Returns a ground-truth image for the current view; only meaningful
    on synthetic scenes where one exists. The caller points it at the
    active view through set_view before requesting guidance."""

    provider_id = "oracle"

    def __init__(self, render_truth):
        """render_truth: callable(view) -> (H, W, 3) ground-truth image."""
        self._render_truth = render_truth
        self._view = None

    def set_view(self, view):
        self._view = view

    def denoise(self, noisy, t, refs, depths, seed):
        if self._view is None:
            raise ConfigError("oracle provider used before set_view")
        return np.clip(self._render_truth(self._view), 0.0, 1.0)


class RemoteProvider(GuidanceProvider):
    """Forwards requests to a guidance service over a byte stream."""

    provider_id = "remote"

    def __init__(self, address: str, timeout: float = 30.0, t_max: int = 10):
        host, _, port = address.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"remote address must be host:port, got {address!r}")
        self.host = host
        self.port = int(port)
        self.timeout = timeout
        self.t_max = t_max
        self._counter = 0

    def denoise(self, noisy, t, refs, depths, seed):
        ref_prev, ref_next = refs
        depth_target, depth_prev, depth_next = depths
        self._counter += 1
        payload = wire.encode_request(
            request_id=f"remote-{self._counter}",
            rendered=noisy,
            ref_prev=ref_prev,
            ref_next=ref_next,
            depth_target=np.where(depth_target.valid, depth_target.values, 0.0),
            depth_prev=np.where(depth_prev.valid, depth_prev.values, 0.0),
            depth_next=np.where(depth_next.valid, depth_next.values, 0.0),
            strength=t / self.t_max,
            t=t,
            seed=seed,
        )
        try:
            with socket.create_connection((self.host, self.port), timeout=self.timeout) as sock:
                sock.sendall(payload)
                kind, fields, tensors = wire.read_frame(sock)
        except socket.timeout as exc:
            raise ProviderTimeoutError(f"guidance service at {self.host}:{self.port} timed out") from exc
        except OSError as exc:
            raise ProviderUnavailableError(f"cannot reach guidance service at {self.host}:{self.port}: {exc}") from exc
        if kind == "error":
            raise ProtocolError(f"guidance service reported: {fields['message']}")
        if "guidance" not in tensors:
            raise ProtocolError("response frame carries no guidance tensor")
        return np.clip(tensors["guidance"], 0.0, 1.0)


class CountingProvider(GuidanceProvider):
    """Instrumentation wrapper: records every call's noise level."""

    def __init__(self, inner: GuidanceProvider):
        self.inner = inner
        self.calls: list[int] = []

    @property
    def provider_id(self):
        return self.inner.provider_id

    def set_view(self, view):
        setter = getattr(self.inner, "set_view", None)
        if setter is not None:
            setter(view)

    def denoise(self, noisy, t, refs, depths, seed):
        self.calls.append(t)
        return self.inner.denoise(noisy, t, refs, depths, seed)


def make_guidance(req: GuidanceRequest, provider: GuidanceProvider, t_max: int = 10, t_min: int = 0) -> GuidanceResponse:
    """Noise the rendered pseudo view to level t, then have the provider
    denoise it down to t_min. t = 0 adds no noise at all, so an identity
    provider reproduces the render bit-exactly."""
    t = int(np.rint(req.strength * t_max))
    t = min(max(t, t_min), t_max)
    noisy = req.rendered
    if t > 0:
        noise = np.random.default_rng(req.seed).standard_normal(req.rendered.shape)
        noisy = req.rendered + (t / t_max) * noise
    guidance = provider.denoise(
        noisy,
        t,
        (req.ref_prev, req.ref_next),
        (req.depth_target, req.depth_prev, req.depth_next),
        req.seed,
    )
    if guidance.shape != req.rendered.shape:
        raise ShapeMismatchError(f"provider returned {guidance.shape}, expected {req.rendered.shape}")
    return GuidanceResponse(np.clip(guidance, 0.0, 1.0), provider.provider_id, t)

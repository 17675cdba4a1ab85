"""Score-distillation guidance.

``sds_grad`` turns one render into a per-pixel gradient image
``w_t * (eps_hat - eps)`` that the renderer's ``backward`` pushes onto the
Gaussians.  The noise predictor sits behind the small ``GuidanceBackend``
protocol; ``MockBackend`` answers with the exact noise that would map the
noised render onto a known target image, which turns SDS into a weighted
reconstruction gradient.  ``ExternalBackend`` speaks a length-prefixed
JSON + float32 wire format to an out-of-process model.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Protocol, Sequence

import numpy as np

from .body import ProxyBody
from .core import Camera


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving schedule indexed by ``t = 1..T``."""

    alphas: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray
    t_min: int
    t_max: int

    def __post_init__(self):
        if not np.allclose(self.alphas**2 + self.sigmas**2, 1.0, atol=1e-6):
            raise ValueError("schedule must satisfy alpha_t^2 + sigma_t^2 = 1")
        if np.any(np.diff(self.alphas) >= 0):
            raise ValueError("alpha_t must decrease with t")
        if not (np.all(np.isfinite(self.weights)) and np.all(self.weights > 0)):
            raise ValueError("w_t must be finite and positive")
        if not 1 <= self.t_min <= self.t_max <= self.timesteps:
            raise ValueError("invalid timestep range")

    @classmethod
    def cosine(cls, timesteps: int = 1000, t_range=(0.02, 0.98)) -> "NoiseSchedule":
        t = np.arange(1, timesteps + 1)
        angle = 0.5 * np.pi * t / (timesteps + 1)
        alphas, sigmas = np.cos(angle), np.sin(angle)
        return cls(alphas, sigmas, sigmas**2,
                   max(1, int(round(t_range[0] * timesteps))),
                   int(round(t_range[1] * timesteps)))

    @property
    def timesteps(self) -> int:
        return len(self.alphas)

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[t - 1])

    def weight(self, t: int) -> float:
        return float(self.weights[t - 1])


@dataclass(frozen=True)
class Skeleton2D:
    names: tuple
    xy: np.ndarray  # (J, 2) pixel coordinates, nan behind the camera
    on_screen: np.ndarray  # (J,) bool

    def to_list(self) -> list:
        return [[n, float(x), float(y), bool(v)]
                for n, (x, y), v in zip(self.names, np.nan_to_num(self.xy), self.on_screen)]


@dataclass(frozen=True)
class GuidanceContext:
    prompt: str
    camera_id: str
    skeleton: Optional[Skeleton2D] = None


class GuidanceBackend(Protocol):
    def predict_noise(self, noisy: np.ndarray, ctx: GuidanceContext, t: int,
                      seed: int) -> np.ndarray: ...


class SDSSample(NamedTuple):
    grad: np.ndarray
    t: int
    noise: np.ndarray


class BackendError(RuntimeError):
    pass


def sds_grad(image: np.ndarray, backend: GuidanceBackend, ctx: GuidanceContext,
             schedule: NoiseSchedule, seed) -> SDSSample:
    """Single-sample SDS gradient image for a rendered color image ``(H, W, 3)``."""
    color = getattr(image, "color", image)
    rng = np.random.default_rng(seed)
    t = int(rng.integers(schedule.t_min, schedule.t_max + 1))
    eps = rng.standard_normal(color.shape)
    noisy = schedule.alpha(t) * color + schedule.sigma(t) * eps
    try:
        eps_hat = np.asarray(backend.predict_noise(noisy, ctx, t, int(rng.integers(2**31))),
                             dtype=np.float64)
    except Exception as exc:
        raise BackendError(f"guidance backend failed for camera {ctx.camera_id!r}, "
                           f"prompt {ctx.prompt!r}, t={t}") from exc
    if eps_hat.shape != color.shape:
        raise BackendError(f"backend returned shape {eps_hat.shape}, expected {color.shape}")
    return SDSSample(schedule.weight(t) * (eps_hat - eps), t, eps)


def dual_sds_grad(local, global_, backend: GuidanceBackend, ctx_local: GuidanceContext,
                  ctx_global: GuidanceContext, schedule: NoiseSchedule,
                  lambda_local: float = 1.0, lambda_global: float = 1.0, seed: int = 0):
    """Weighted SDS gradient images for the local (layer-only) and global renders.

    The two expectations are sampled independently; the local term uses
    ``seed`` itself so ``lambda_global = 0`` reproduces ``sds_grad`` exactly.
    """
    if lambda_local < 0 or lambda_global < 0:
        raise ValueError("dual-SDS weights must be non-negative")
    lc = getattr(local, "color", local)
    gc = getattr(global_, "color", global_)
    g_local = np.zeros_like(lc)
    g_global = np.zeros_like(gc)
    if lambda_local > 0:
        g_local = lambda_local * sds_grad(lc, backend, ctx_local, schedule, seed).grad
    if lambda_global > 0:
        g_global = lambda_global * sds_grad(gc, backend, ctx_global, schedule, _substream(seed, 1)).grad
    return g_local, g_global


def _substream(seed, k: int) -> list:
    base = list(seed) if isinstance(seed, (list, tuple, np.ndarray)) else [seed]
    return [int(x) for x in base] + [k]


def global_prompt(body_prompt: str, layer_prompt: str) -> str:
    if not body_prompt:
        return layer_prompt
    if not layer_prompt:
        return body_prompt
    return f"{body_prompt}, wearing {layer_prompt}"


def project_skeleton(body: ProxyBody, camera: Camera) -> Skeleton2D:
    names = tuple(body.joints)
    pts = np.array([body.joints[n] for n in names])
    W, t = camera.world_to_camera()
    cam = pts @ W.T + t
    f = camera.focal
    cx, cy = camera.principal_point
    front = cam[:, 2] > camera.near
    z = np.where(front, cam[:, 2], np.nan)
    xy = np.stack([f * cam[:, 0] / z + cx, f * cam[:, 1] / z + cy], axis=1)
    with np.errstate(invalid="ignore"):
        inside = (xy[:, 0] >= 0) & (xy[:, 0] < camera.width) & (xy[:, 1] >= 0) & (xy[:, 1] < camera.height)
    return Skeleton2D(names, xy, front & inside)


@dataclass
class MockBackend:
    """Deterministic stand-in for a diffusion model, built from known target views.

    ``predict_noise`` returns ``(c_t - alpha_t * target) / sigma_t``, so the SDS
    gradient becomes ``w_t * alpha_t / sigma_t * (c - target)``.  Targets are
    looked up by ``(prompt, camera_id)`` first, then by ``camera_id`` alone.
    """

    schedule: NoiseSchedule = field(default_factory=NoiseSchedule.cosine)
    targets: dict = field(default_factory=dict)
    cameras: dict = field(default_factory=dict)

    @classmethod
    def from_views(cls, views: Sequence[tuple[Camera, np.ndarray]], prompt: Optional[str] = None,
                   schedule: Optional[NoiseSchedule] = None) -> "MockBackend":
        backend = cls(schedule or NoiseSchedule.cosine())
        backend.add_views(views, prompt)
        return backend

    def add_views(self, views: Sequence[tuple[Camera, np.ndarray]], prompt: Optional[str] = None):
        if not views:
            raise ValueError("mock backend needs at least one reference view")
        for cam, image in views:
            image = np.asarray(image, dtype=np.float64)
            if image.shape[:2] != (cam.height, cam.width):
                raise ValueError(f"view {cam.id!r}: image {image.shape[:2]} does not match "
                                 f"camera resolution {cam.resolution}")
            self.targets[(prompt, cam.id)] = image
            self.cameras[cam.id] = cam

    def views_for(self, prompt: Optional[str]) -> list[Camera]:
        ids = [cid for (p, cid) in self.targets if p == prompt or p is None]
        return [self.cameras[c] for c in dict.fromkeys(ids)]

    def target(self, ctx: GuidanceContext) -> np.ndarray:
        for key in ((ctx.prompt, ctx.camera_id), (None, ctx.camera_id)):
            if key in self.targets:
                return self.targets[key]
        raise KeyError(f"no reference view for camera {ctx.camera_id!r} (prompt {ctx.prompt!r})")

    def predict_noise(self, noisy, ctx, t, seed=0):
        target = self.target(ctx)
        return (noisy - self.schedule.alpha(t) * target) / self.schedule.sigma(t)


# --- external backend wire format -------------------------------------------
#
# frame   := u32 little-endian header length | UTF-8 JSON header | payload
# payload := raw little-endian float32 tensor, shape given by header["shape"]
# request header:  {"kind": "request", "prompt", "camera_id", "skeleton", "t",
#                   "seed", "shape", "dtype": "<f4"}
# response header: {"kind": "response", "shape", "dtype": "<f4"} or
#                  {"kind": "error", "message"}

WIRE_DTYPE = "<f4"


def encode_frame(header: dict, tensor: Optional[np.ndarray] = None) -> bytes:
    payload = b""
    header = dict(header)
    if tensor is not None:
        arr = np.ascontiguousarray(tensor, dtype=WIRE_DTYPE)
        header["shape"] = list(arr.shape)
        header["dtype"] = WIRE_DTYPE
        payload = arr.tobytes()
    header["payload_bytes"] = len(payload)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw + payload


def decode_frame(data: bytes) -> tuple[dict, Optional[np.ndarray]]:
    (n,) = struct.unpack_from("<I", data, 0)
    header = json.loads(data[4:4 + n].decode("utf-8"))
    payload = data[4 + n:]
    if len(payload) != header.get("payload_bytes", 0):
        raise ValueError("frame payload length mismatch")
    if "shape" not in header:
        return header, None
    if header.get("dtype") != WIRE_DTYPE:
        raise ValueError(f"unsupported dtype {header.get('dtype')}")
    tensor = np.frombuffer(payload, dtype=WIRE_DTYPE).reshape(header["shape"])
    return header, tensor


def encode_request(noisy: np.ndarray, ctx: GuidanceContext, t: int, seed: int) -> bytes:
    header = {
        "kind": "request",
        "prompt": ctx.prompt,
        "camera_id": ctx.camera_id,
        "skeleton": ctx.skeleton.to_list() if ctx.skeleton is not None else None,
        "t": int(t),
        "seed": int(seed),
    }
    return encode_frame(header, noisy)


def read_frame(sock: socket.socket) -> bytes:
    def exact(k: int) -> bytes:
        buf = bytearray()
        while len(buf) < k:
            chunk = sock.recv(k - len(buf))
            if not chunk:
                raise ConnectionError("connection closed mid-frame")
            buf.extend(chunk)
        return bytes(buf)

    head = exact(4)
    (n,) = struct.unpack("<I", head)
    raw = exact(n)
    payload = exact(json.loads(raw.decode("utf-8")).get("payload_bytes", 0))
    return head + raw + payload


@dataclass
class ExternalBackend:
    """Client for an out-of-process noise predictor at ``host:port``."""

    host: str = "127.0.0.1"
    port: int = 7860
    timeout: float = 60.0

    def predict_noise(self, noisy, ctx, t, seed=0):
        with socket.create_connection((self.host, self.port), timeout=self.timeout) as sock:
            sock.sendall(encode_request(noisy, ctx, t, seed))
            header, tensor = decode_frame(read_frame(sock))
        if header.get("kind") == "error":
            raise BackendError(header.get("message", "remote error"))
        if tensor is None or tensor.shape != noisy.shape:
            raise BackendError("malformed response from guidance service")
        return tensor.astype(np.float64)

"""Differentiable Gaussian splatting: projection, tile rasterization, backward pass.

The forward pass projects every Gaussian with the EWA approximation, sorts by
camera-space depth, bins the 3-sigma footprints into square tiles and
front-to-back composites color, opacity and depth per pixel.  ``backward``
pushes per-pixel image gradients back onto the stored layer parameters.
``oracle_render`` is a deliberately naive reference used in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from . import _kernels
from .core import (
    Camera,
    LayeredAvatar,
    PointSet,
    compose_prefix,
    quat_to_rotmat,
    sigmoid,
)


class ContractError(RuntimeError):
    """``backward`` called with inputs that do not match the cached forward pass."""


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    cutoff_sigma: Optional[float] = 3.0  # None evaluates every Gaussian everywhere
    min_transmittance: float = 1e-6  # 0 disables early termination
    low_pass: float = 0.3
    eps_depth: float = 1e-6
    mask_threshold: float = 0.5

    @property
    def qmax(self) -> float:
        return np.inf if self.cutoff_sigma is None else float(self.cutoff_sigma) ** 2


DEFAULT_CONFIG = RenderConfig()

# smooth everywhere: used by the finite-difference gradient checks
EXACT_CONFIG = RenderConfig(cutoff_sigma=None, min_transmittance=0.0)


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float
    color: np.ndarray
    opacity: float
    index: int


@dataclass
class Projection:
    """Projected Gaussians in compositing order (depth ascending, ties by index)."""

    index: np.ndarray  # position in the input point set
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray  # (a, b, c) of the inverse 2D covariance
    view_depth: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    cam: np.ndarray  # camera-space centers
    jac: np.ndarray  # (P, 2, 3) projection Jacobians
    cov_view: np.ndarray  # W Sigma W^T

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, i: int) -> ProjectedGaussian:
        return ProjectedGaussian(self.mean2d[i], self.cov2d[i], float(self.view_depth[i]),
                                 self.color[i], float(self.opacity[i]), int(self.index[i]))


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    opacity_map: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W)
    alpha_mask: np.ndarray  # (H, W) bool
    cache: Any = field(default=None, repr=False, compare=False)


@dataclass
class _Cache:
    points: PointSet
    camera: Camera
    config: RenderConfig
    proj: Projection
    pairs: np.ndarray
    ranges: np.ndarray
    tiles_x: int
    last: np.ndarray
    dsum: np.ndarray


@dataclass
class PixelGrads:
    """Gradients of a scalar loss with respect to the rendered images."""

    color: Optional[np.ndarray] = None
    opacity: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None

    def __add__(self, other: "PixelGrads") -> "PixelGrads":
        def add(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return a + b

        return PixelGrads(add(self.color, other.color), add(self.opacity, other.opacity),
                          add(self.depth, other.depth))

    def scaled(self, k: float) -> "PixelGrads":
        return PixelGrads(*(None if g is None else k * g
                            for g in (self.color, self.opacity, self.depth)))


@dataclass
class PointGrads:
    """Per-point gradients w.r.t. the stored (pre-activation) parameters.

    ``scale`` is w.r.t. log-scale, ``rotation`` w.r.t. the raw quaternion,
    ``color``/``opacity`` w.r.t. their sigmoid logits.  The ``*_act`` fields hold
    the same gradients w.r.t. the activated color and opacity.
    """

    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    color_act: np.ndarray
    opacity_act: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "PointGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                   np.zeros(n), np.zeros((n, 3)), np.zeros(n))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"center": self.center, "scale": self.scale, "rotation": self.rotation,
                "color": self.color, "opacity": self.opacity}

    def __add__(self, other: "PointGrads") -> "PointGrads":
        return PointGrads(*(a + b for a, b in zip(self._fields(), other._fields())))

    def _fields(self):
        return (self.center, self.scale, self.rotation, self.color, self.opacity,
                self.color_act, self.opacity_act)

    def take(self, mask: np.ndarray) -> "PointGrads":
        return PointGrads(*(a[mask] for a in self._fields()))


def project(points: PointSet, camera: Camera, config: RenderConfig = DEFAULT_CONFIG) -> Projection:
    W, t = camera.world_to_camera()
    cam = points.centers @ W.T + t
    z = cam[:, 2]
    keep = (z > camera.near) & (z < camera.far)
    idx = np.flatnonzero(keep)
    order = np.lexsort((idx, z[idx]))
    idx = idx[order]
    cam = np.ascontiguousarray(cam[idx])
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    f = camera.focal
    cx, cy = camera.principal_point

    k = len(idx)
    J = np.empty((k, 2, 3))
    V = np.empty((k, 3, 3))
    cov2d = np.empty((k, 2, 2))
    conic = np.empty((k, 3))
    if k:
        _kernels.project_geometry(cam, np.ascontiguousarray(points.log_scales[idx]),
                                  np.ascontiguousarray(points.quats[idx]), W, f,
                                  config.low_pass, J, V, cov2d, conic)
    mean2d = np.stack([f * x / z + cx, f * y / z + cy], axis=1)
    return Projection(
        index=idx,
        mean2d=mean2d,
        cov2d=cov2d,
        conic=conic,
        view_depth=z.copy(),
        color=points.colors[idx],
        opacity=points.opacities[idx],
        cam=cam,
        jac=J,
        cov_view=V,
    )


def _bin_tiles(proj: Projection, camera: Camera, config: RenderConfig):
    ts = config.tile_size
    width, height = camera.resolution
    tiles_x = -(-width // ts)
    tiles_y = -(-height // ts)
    n_tiles = tiles_x * tiles_y
    if len(proj) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((n_tiles, 2), dtype=np.int64), tiles_x

    cov = proj.cov2d
    mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid**2 - (cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2), 0))
    if config.cutoff_sigma is None:
        r = np.full(len(proj), np.inf)
    else:
        r = config.cutoff_sigma * np.sqrt(lam) * (1 + 1e-9) + 1e-9
    u, v = proj.mean2d[:, 0], proj.mean2d[:, 1]
    # pixels whose centers fall inside [mean - r, mean + r]
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.ceil(u - r - 0.5), 0, width)
        x1 = np.clip(np.floor(u + r - 0.5), -1, width - 1)
        y0 = np.clip(np.ceil(v - r - 0.5), 0, height)
        y1 = np.clip(np.floor(v + r - 0.5), -1, height - 1)
    valid = (x1 >= x0) & (y1 >= y0)
    tx0 = np.where(valid, x0 // ts, 0).astype(np.int64)
    tx1 = np.where(valid, x1 // ts, -1).astype(np.int64)
    ty0 = np.where(valid, y0 // ts, 0).astype(np.int64)
    ty1 = np.where(valid, y1 // ts, -1).astype(np.int64)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = np.where(valid, nx * ny, 0)
    total = int(counts.sum())
    rank = np.repeat(np.arange(len(proj)), counts)
    first = np.cumsum(counts) - counts
    local = np.arange(total) - np.repeat(first, counts)
    tile_x = tx0[rank] + local % nx[rank]
    tile_y = ty0[rank] + local // nx[rank]
    tile_id = tile_y * tiles_x + tile_x
    order = np.argsort(tile_id, kind="stable")
    pairs = rank[order]
    sorted_ids = tile_id[order]
    bounds = np.searchsorted(sorted_ids, np.arange(n_tiles + 1))
    ranges = np.stack([bounds[:-1], bounds[1:]], axis=1).astype(np.int64)
    return pairs.astype(np.int64), ranges, tiles_x


def _as_points(points) -> PointSet:
    if isinstance(points, PointSet):
        return points
    if hasattr(points, "as_points"):
        return points.as_points()
    raise TypeError(f"cannot render {type(points).__name__}")


def render(points, camera: Camera, config: RenderConfig = DEFAULT_CONFIG) -> RenderOutput:
    points = _as_points(points)
    width, height = camera.resolution
    proj = project(points, camera, config)
    pairs, ranges, tiles_x = _bin_tiles(proj, camera, config)
    feat = np.concatenate([proj.color, proj.view_depth[:, None]], axis=1)
    out_feat = np.zeros((height, width, _kernels.NFEAT))
    alpha = np.zeros((height, width))
    last = np.full((height, width), -1, dtype=np.int64)
    if len(pairs):
        _kernels.raster_forward(
            np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
            np.ascontiguousarray(proj.opacity), np.ascontiguousarray(feat),
            ranges, pairs, width, height, config.tile_size, tiles_x,
            config.qmax, config.min_transmittance, out_feat, alpha, last,
        )
    dsum = out_feat[..., 3]
    depth = dsum / np.maximum(alpha, config.eps_depth)
    cache = _Cache(points, camera, config, proj, pairs, ranges, tiles_x, last, dsum)
    return RenderOutput(
        color=out_feat[..., :3].copy(),
        opacity_map=alpha,
        depth=depth,
        alpha_mask=alpha >= config.mask_threshold,
        cache=cache,
    )


def backward(points, camera: Camera, loss_grad: PixelGrads, output: RenderOutput) -> PointGrads:
    """Per-point parameter gradients for the image gradients ``loss_grad``.

    ``output`` must be the result of ``render(points, camera)``. Gradients of
    attributes flagged frozen on the point set are returned as zeros.
    """
    points = _as_points(points)
    cache: _Cache = output.cache
    if cache is None or cache.points is not points or cache.camera != camera:
        raise ContractError("backward inputs do not match the cached forward pass")
    config = cache.config
    proj = cache.proj
    width, height = camera.resolution
    n = len(points)
    grads = PointGrads.zeros(n)
    if len(cache.pairs) == 0:
        return grads

    alpha = output.opacity_map
    g_color = np.zeros((height, width, 3)) if loss_grad.color is None else loss_grad.color
    g_alpha = np.zeros((height, width)) if loss_grad.opacity is None else loss_grad.opacity.copy()
    g_feat = np.zeros((height, width, _kernels.NFEAT))
    g_feat[..., :3] = g_color
    if loss_grad.depth is not None:
        denom = np.maximum(alpha, config.eps_depth)
        g_feat[..., 3] = loss_grad.depth / denom
        g_alpha -= np.where(alpha > config.eps_depth, loss_grad.depth * cache.dsum / denom**2, 0.0)

    feat = np.concatenate([proj.color, proj.view_depth[:, None]], axis=1)
    pair_grad = np.zeros((len(cache.pairs), _kernels.NPG))
    _kernels.raster_backward(
        np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
        np.ascontiguousarray(proj.opacity), np.ascontiguousarray(feat),
        cache.ranges, cache.pairs, width, height, config.tile_size, cache.tiles_x,
        config.qmax, cache.last, np.ascontiguousarray(g_feat), np.ascontiguousarray(g_alpha),
        pair_grad,
    )
    pg = _kernels.reduce_pairs(cache.pairs, pair_grad, len(proj))
    g_opac = pg[:, 5]
    g_col = pg[:, 6:9]
    idx = proj.index
    k = len(proj)
    g_center = np.empty((k, 3))
    g_logscale = np.empty((k, 3))
    g_quat = np.empty((k, 4))
    W, _ = camera.world_to_camera()
    _kernels.geometry_backward(pg, proj.conic, proj.jac, proj.cov_view, proj.cam, camera.focal, W,
                               np.ascontiguousarray(points.quats[idx]),
                               np.ascontiguousarray(points.log_scales[idx]),
                               g_center, g_logscale, g_quat)

    grads.center[idx] = g_center
    grads.scale[idx] = g_logscale
    grads.rotation[idx] = g_quat
    grads.color_act[idx] = g_col
    grads.opacity_act[idx] = g_opac
    grads.color[idx] = g_col * proj.color * (1 - proj.color)
    grads.opacity[idx] = g_opac * proj.opacity * (1 - proj.opacity)

    frozen = points.frozen
    if frozen.any():
        for j, arr in enumerate((grads.center, grads.scale, grads.rotation)):
            arr[frozen[:, j]] = 0.0
        grads.color[frozen[:, 3]] = 0.0
        grads.color_act[frozen[:, 3]] = 0.0
        grads.opacity[frozen[:, 4]] = 0.0
        grads.opacity_act[frozen[:, 4]] = 0.0
    return grads


def render_layer_pair(avatar: LayeredAvatar, m: int, camera: Camera,
                      config: RenderConfig = DEFAULT_CONFIG):
    """Local render of layer ``m`` alone and global render of layers ``1..m``."""
    global_points = compose_prefix(avatar, m)
    local_points = avatar.layers[m - 1].as_points()
    return render(local_points, camera, config), render(global_points, camera, config)


def oracle_render(points, camera: Camera, config: RenderConfig = DEFAULT_CONFIG) -> RenderOutput:
    """Naive per-Gaussian, whole-image compositing with no tiling or early exit.

    Projection is recomputed point by point here rather than shared with
    ``project`` so the two paths stay independent.
    """
    points = _as_points(points)
    width, height = camera.resolution
    W, t = camera.world_to_camera()
    f = camera.focal
    cx, cy = camera.principal_point
    qmax = config.qmax
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    PX, PY = np.meshgrid(xs, ys)

    items = []
    for i in range(len(points)):
        pc = W @ points.centers[i] + t
        if not camera.near < pc[2] < camera.far:
            continue
        items.append((pc[2], i, pc))
    items.sort(key=lambda it: (it[0], it[1]))

    T = np.ones((height, width))
    color = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    dsum = np.zeros((height, width))
    for z, i, pc in items:
        R = quat_to_rotmat(points.quats[i])
        S = np.diag(np.exp(2 * points.log_scales[i]))
        sigma3 = R @ S @ R.T
        Jm = np.array([[f / z, 0.0, -f * pc[0] / z**2], [0.0, f / z, -f * pc[1] / z**2]])
        cov = Jm @ W @ sigma3 @ W.T @ Jm.T + config.low_pass * np.eye(2)
        inv = np.linalg.inv(cov)
        dx = PX - (f * pc[0] / z + cx)
        dy = PY - (f * pc[1] / z + cy)
        q = inv[0, 0] * dx * dx + (inv[0, 1] + inv[1, 0]) * dx * dy + inv[1, 1] * dy * dy
        g = np.where(q <= qmax, np.exp(-0.5 * q), 0.0)
        sig = sigmoid(points.opacity_logits[i]) * g
        w = sig * T
        color += w[..., None] * sigmoid(points.color_logits[i])
        alpha += w
        dsum += w * z
        T = T * (1 - sig)
    depth = dsum / np.maximum(alpha, config.eps_depth)
    return RenderOutput(color, alpha, depth, alpha >= config.mask_threshold)


"""Layer-by-layer generation (coarse + fine stages) and garment transfer."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .body import ProxyBody, init_layer
from .core import (
    Camera,
    ConfigurationError,
    FrozenFlags,
    GaussianLayer,
    LayeredAvatar,
    PointSet,
    compose_prefix,
    logit,
    orbit_camera,
    sigmoid,
)
from .guidance import (
    GuidanceContext,
    NoiseSchedule,
    dual_sds_grad,
    global_prompt,
    project_skeleton,
    sds_grad,
)
from .losses import (
    density_loss,
    human_fitting_loss,
    similarity_loss,
    synth_mask,
    visibility_loss,
)
from .optim import DEFAULT_LR, LayerAdam
from .render import DEFAULT_CONFIG, PixelGrads, PointGrads, RenderConfig, backward, render

log = logging.getLogger(__name__)


class Diverged(RuntimeError):
    """Optimization left the valid region (non-finite values or escaped points)."""


TransferDivergence = Diverged


@dataclass
class StageConfig:
    iterations: int = 400
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    lambda_local: float = 1.0
    lambda_global: float = 1.0
    lambda_density: float = 1.0
    densify_rounds: int = 0
    cameras_per_step: int = 2
    resolution: tuple = (128, 128)
    seed: int = 0

    def __post_init__(self):
        if min(self.iterations, self.densify_rounds, self.cameras_per_step) < 0:
            raise ValueError("stage counts must be non-negative")
        if min(self.lambda_local, self.lambda_global, self.lambda_density) < 0:
            raise ValueError("loss weights must be non-negative")


def coarse_defaults(**kw) -> StageConfig:
    return StageConfig(**{"iterations": 400, "lambda_density": 1.0, "densify_rounds": 0, **kw})


def fine_defaults(**kw) -> StageConfig:
    return StageConfig(**{"iterations": 600, "lambda_density": 0.0, "densify_rounds": 4, **kw})


@dataclass
class TransferConfig:
    # only center and scale learn; the other attributes have no rate by construction
    iterations: int = 300
    lr_center: float = 1e-3
    lr_scale: float = 5e-3
    lambda_hf: float = 1.0
    lambda_ssim: float = 0.1
    lambda_vis: float = 1.0
    delta_occ: float = 0.03
    cameras_per_step: int = 2
    n_views: int = 16
    resolution: tuple = (128, 128)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.n_views < 1 or self.cameras_per_step < 1:
            raise ValueError("invalid transfer counts")
        if min(self.lambda_hf, self.lambda_ssim, self.lambda_vis, self.delta_occ) < 0:
            raise ValueError("transfer weights must be non-negative")


@dataclass
class StepRecord:
    stage: str
    step: int
    points: int
    sds_norm: float
    density: float
    inner_grad: float = 0.0  # largest |gradient| reaching any inner-layer parameter


def densify_perturb(layer: GaussianLayer, seed=0, position_noise: float = 0.0005,
                    color_noise=(0.0, 0.05)) -> GaussianLayer:
    """Append a jittered duplicate of every point (center and color only)."""
    if len(layer) == 0:
        raise ValueError("cannot densify an empty layer")
    rng = np.random.default_rng(seed)
    n = len(layer)
    d_center = rng.uniform(-position_noise, position_noise, (n, 3))
    d_color = rng.uniform(color_noise[0], color_noise[1], (n, 3))
    new_centers = layer.centers + d_center
    shifted = np.clip(sigmoid(layer.color_logits) + d_color, 0.0, 1.0)
    new_colors = np.where(d_color == 0, layer.color_logits, logit(shifted))
    return layer.copy(
        centers=np.concatenate([layer.centers, new_centers]),
        log_scales=np.concatenate([layer.log_scales, layer.log_scales]),
        quats=np.concatenate([layer.quats, layer.quats]),
        color_logits=np.concatenate([layer.color_logits, new_colors]),
        opacity_logits=np.concatenate([layer.opacity_logits, layer.opacity_logits]),
    )


def sample_orbit(rng, center, height, resolution, ident: str) -> Camera:
    azimuth = rng.uniform(0, 2 * np.pi)
    elevation = np.deg2rad(rng.uniform(-15.0, 30.0))
    return orbit_camera(azimuth, elevation, 2.5 * height, tuple(center), resolution, id=ident)


def _route(points: PointSet, grads: PointGrads, m: int) -> PointGrads:
    """Gradient rows belonging to layer ``m``; every other layer is dropped."""
    return grads.take(points.layer_ids == m)


class _Stage:
    """One optimization stage over layer ``m`` of ``avatar``."""

    def __init__(self, avatar: LayeredAvatar, m: int, backend, cfg: StageConfig, name: str,
                 body: ProxyBody, render_config: RenderConfig, history: list,
                 callback: Optional[Callable], debug: bool):
        self.avatar = avatar
        self.m = m
        self.backend = backend
        self.cfg = cfg
        self.name = name
        self.body = body
        self.render_config = render_config
        self.history = history
        self.callback = callback
        self.debug = debug
        self.schedule = getattr(backend, "schedule", None) or NoiseSchedule.cosine()

    @property
    def layer(self) -> GaussianLayer:
        return self.avatar.layers[self.m - 1]

    def cameras(self, rng, step: int) -> list[Camera]:
        views = []
        if hasattr(self.backend, "views_for"):
            views = self.backend.views_for(self.layer.prompt)
        if views:
            pick = rng.integers(len(views), size=self.cfg.cameras_per_step)
            return [views[i] for i in pick]
        return [sample_orbit(rng, self.body.center, self.body.height, self.cfg.resolution,
                             f"{self.name}-{step}-{k}") for k in range(self.cfg.cameras_per_step)]

    def run(self, iterations: int, optimizer: LayerAdam, step0: int) -> None:
        cfg = self.cfg
        m = self.m
        for it in range(iterations):
            step = step0 + it
            rng = np.random.default_rng([cfg.seed, hash_name(self.name), step])
            layer = self.layer
            grads = PointGrads.zeros(len(layer))
            sds_norm = 0.0
            dens = 0.0
            inner_grad = 0.0
            for k, cam in enumerate(self.cameras(rng, step)):
                seed = [cfg.seed, hash_name(self.name), step, k]
                skel = project_skeleton(self.body, cam)
                ctx_l = GuidanceContext(layer.prompt, cam.id, skel)
                local_pts = layer.as_points()
                out_l = render(local_pts, cam, self.render_config)
                if m == 1:
                    g_l = cfg.lambda_local * sds_grad(out_l, self.backend, ctx_l, self.schedule, seed).grad
                    g_g = None
                else:
                    ctx_g = GuidanceContext(global_prompt(self.avatar.body_prompt, layer.prompt),
                                            cam.id, skel)
                    global_pts = compose_prefix(self.avatar, m)
                    out_g = render(global_pts, cam, self.render_config)
                    g_l, g_g = dual_sds_grad(out_l, out_g, self.backend, ctx_l, ctx_g, self.schedule,
                                             cfg.lambda_local, cfg.lambda_global, seed)
                sds_norm += float(np.sqrt(np.sum(g_l**2)))
                pix = PixelGrads(color=g_l)
                if cfg.lambda_density > 0:
                    d = density_loss(out_l.opacity_map, synth_mask(out_l))
                    dens += d.value
                    pix = pix + PixelGrads(opacity=cfg.lambda_density * d.grad)
                grads = grads + backward(local_pts, cam, pix, out_l)
                if g_g is not None and cfg.lambda_global > 0:
                    full = backward(global_pts, cam, PixelGrads(color=g_g), out_g)
                    inner = full.take(global_pts.layer_ids != m)
                    inner_grad = max(inner_grad, max(
                        float(np.abs(a).max(initial=0.0)) for a in inner.as_dict().values()))
                    grads = grads + _route(global_pts, full, m)

            if self.debug:
                before = {a: v.copy() for a, v in layer.params().items()
                          if getattr(layer.frozen, a)}
            optimizer.step(layer, grads.as_dict())
            bad = [a for a, v in layer.params().items() if not np.all(np.isfinite(v))]
            if bad:
                raise Diverged(f"layer {m} {self.name} step {step}: non-finite {bad}")
            if self.debug:
                for a, v in before.items():
                    assert np.array_equal(v, layer.params()[a]), f"frozen {a} changed"
            self.history.append(StepRecord(self.name, step, len(layer), sds_norm, dens, inner_grad))
            if self.callback is not None:
                self.callback(self.name, step, self.avatar)


def hash_name(name: str) -> int:
    return zlib.crc32(name.encode())


def generate_layer(
    avatar: LayeredAvatar,
    m: int,
    prompt: str,
    backend,
    coarse: Optional[StageConfig] = None,
    fine: Optional[StageConfig] = None,
    body: Optional[ProxyBody] = None,
    joints=None,
    n_init: int = 5000,
    render_config: RenderConfig = DEFAULT_CONFIG,
    history: Optional[list] = None,
    callback: Optional[Callable] = None,
    debug: bool = False,
) -> LayeredAvatar:
    """Generate layer ``m`` on top of the (already generated) layers ``1..m-1``.

    Returns a new avatar; the input avatar is not modified.  The finished layer
    is rounded onto the float32 grid so it matches what the asset format stores.
    """
    coarse = coarse or coarse_defaults()
    fine = fine or fine_defaults()
    body = body or ProxyBody()
    history = history if history is not None else []
    if not 1 <= m <= len(avatar) + 1:
        raise IndexError(f"cannot generate layer {m} on an avatar with {len(avatar)} layers")
    avatar = avatar.copy()
    avatar.layers = avatar.layers[: m - 1]
    for inner in avatar.layers:
        inner.frozen = FrozenFlags.all()
    try:
        layer = init_layer(body, m, joints, n=n_init, seed=coarse.seed, prompt=prompt)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    avatar.add_layer(layer)

    stage = _Stage(avatar, m, backend, coarse, "coarse", body, render_config, history, callback, debug)
    stage.run(coarse.iterations, LayerAdam(layer, coarse.lr, coarse.iterations), 0)

    fine_stage = _Stage(avatar, m, backend, fine, "fine", body, render_config, history, callback, debug)
    opt = LayerAdam(avatar.layers[m - 1], fine.lr, fine.iterations)
    rounds = fine.densify_rounds
    bounds = np.linspace(0, fine.iterations, rounds + 1).round().astype(int) if rounds else [0, fine.iterations]
    for r in range(max(rounds, 1)):
        if rounds:
            old = avatar.layers[m - 1]
            avatar.layers[m - 1] = densify_perturb(old, seed=[fine.seed, r])
            opt.grow(len(old))
        fine_stage.run(int(bounds[r + 1] - bounds[r]), opt, int(bounds[r]))

    avatar.layers[m - 1].quantize()
    return avatar


# --- garment transfer --------------------------------------------------------


def transfer_views(points: PointSet, cfg: TransferConfig) -> list[Camera]:
    lo, hi = points.centers.min(0), points.centers.max(0)
    center = 0.5 * (lo + hi)
    height = float(hi[1] - lo[1])
    views = []
    for i in range(cfg.n_views):
        az = 2 * np.pi * i / cfg.n_views
        el = np.deg2rad(20.0 if i % 2 else 0.0)
        views.append(orbit_camera(az, el, 2.5 * height, tuple(center), cfg.resolution,
                                  id=f"transfer-{i}"))
    return views


@dataclass
class _View:
    camera: Camera
    d_av: np.ndarray
    m_av: np.ndarray
    d_before: np.ndarray


@dataclass
class TransferMetrics:
    human_fitting: float
    similarity: float  # mean SSIM(d_m, d_before)
    visibility: float

    def __str__(self):
        return (f"L_HF={self.human_fitting:.3e} SSIM={self.similarity:.4f} "
                f"L_vis={self.visibility:.3e}")


class GarmentTransfer:
    """Optimization state for fitting one garment layer onto a new avatar."""

    def __init__(self, source_layer: GaussianLayer, target_avatar: LayeredAvatar,
                 cfg: TransferConfig, render_config: RenderConfig = DEFAULT_CONFIG):
        if len(target_avatar) == 0:
            raise ConfigurationError("target avatar has no body layer")
        if not np.all(np.isfinite(source_layer.centers)):
            raise ConfigurationError("source garment has non-finite centers")
        self.cfg = cfg
        self.render_config = render_config
        self.inner = PointSet.from_layers(
            [L.copy(frozen=FrozenFlags.all()) for L in target_avatar.layers])
        top = max(L.layer_index for L in target_avatar.layers)
        self.source = source_layer.copy(layer_index=top + 1)
        self.layer = source_layer.copy(layer_index=top + 1, frozen=FrozenFlags.transfer())
        lo, hi = self.inner.centers.min(0), self.inner.centers.max(0)
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        self.guard = (mid - 10 * half, mid + 10 * half)
        self.views = []
        src_pts = self.source.as_points()
        for cam in transfer_views(self.inner, cfg):
            body = render(self.inner, cam, render_config)
            before = render(src_pts, cam, render_config)
            self.views.append(_View(cam, body.depth, body.alpha_mask, before.depth))

    def losses(self, view: _View, out):
        cfg = self.cfg
        m_m = out.alpha_mask
        hf = human_fitting_loss(view.d_av, out.depth, view.m_av, m_m)
        ss = similarity_loss(out.depth, view.d_before)
        vis = visibility_loss(view.d_av, out.depth, m_m, cfg.delta_occ, occluder_mask=view.m_av)
        return hf, ss, vis

    def metrics(self, layer: Optional[GaussianLayer] = None) -> TransferMetrics:
        pts = (layer or self.layer).as_points()
        acc = np.zeros(3)
        for view in self.views:
            hf, ss, vis = self.losses(view, render(pts, view.camera, self.render_config))
            acc += (hf.value, -ss.value, vis.value)
        acc /= len(self.views)
        return TransferMetrics(*acc)

    def run(self, history: Optional[list] = None) -> GaussianLayer:
        cfg = self.cfg
        layer = self.layer
        if cfg.iterations == 0:
            return layer
        opt = LayerAdam(layer, {"center": cfg.lr_center, "scale": cfg.lr_scale}, cfg.iterations)
        for step in range(cfg.iterations):
            rng = np.random.default_rng([cfg.seed, 7, step])
            pick = rng.choice(len(self.views), size=min(cfg.cameras_per_step, len(self.views)),
                              replace=False)
            grads = PointGrads.zeros(len(layer))
            total = 0.0
            for i in pick:
                view = self.views[i]
                pts = layer.as_points()
                out = render(pts, view.camera, self.render_config)
                hf, ss, vis = self.losses(view, out)
                total += cfg.lambda_hf * hf.value + cfg.lambda_ssim * ss.value + cfg.lambda_vis * vis.value
                g = cfg.lambda_hf * hf.grad + cfg.lambda_ssim * ss.grad + cfg.lambda_vis * vis.grad
                grads = grads + backward(pts, view.camera, PixelGrads(depth=g), out)
            opt.step(layer, grads.as_dict())
            outside = np.any((layer.centers < self.guard[0]) | (layer.centers > self.guard[1]), axis=1)
            if outside.any():
                raise Diverged(
                    f"step {step}: {int(outside.sum())} garment centers left the 10x body box "
                    f"{self.guard[0].round(3).tolist()}..{self.guard[1].round(3).tolist()}; "
                    f"last loss {total:.4g}")
            if history is not None:
                history.append(total / len(pick))
        return layer.quantize()


def transfer_garment(source_layer: GaussianLayer, target_avatar: LayeredAvatar,
                     cfg: Optional[TransferConfig] = None,
                     render_config: RenderConfig = DEFAULT_CONFIG,
                     history: Optional[list] = None) -> GaussianLayer:
    """Fit ``source_layer`` onto ``target_avatar`` by moving only centers and scales."""
    return GarmentTransfer(source_layer, target_avatar, cfg or TransferConfig(),
                           render_config).run(history)

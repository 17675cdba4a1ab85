"""Synthetic textured figures and reference views for mock-guided runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .body import ProxyBody, init_layer, layer_offset, sample_surface
from .core import Camera, GaussianLayer, orbit_camera
from .render import DEFAULT_CONFIG, RenderConfig, render


def banded_colors(points: np.ndarray, body: ProxyBody) -> np.ndarray:
    """Smooth color field: horizontal bands in height plus a slow azimuthal swirl."""
    c = body.center
    rel = points - c
    h = rel[:, 1] / body.height
    az = np.arctan2(rel[:, 0], rel[:, 2])
    r = 0.5 + 0.35 * np.sin(6 * np.pi * h + az)
    g = 0.5 + 0.35 * np.cos(4 * np.pi * h)
    b = 0.5 + 0.35 * np.sin(2 * az + 3 * np.pi * h)
    return np.stack([r, g, b], axis=1)


def textured_figure(body: ProxyBody | None = None, n: int = 20000, m: int = 1,
                    joints=None, seed: int = 1234, scale: float = 0.012,
                    opacity: float = 0.9) -> GaussianLayer:
    """Dense ground-truth layer on the proxy surface with a banded texture."""
    body = body or ProxyBody()
    if joints is None:
        pts = sample_surface(body, n, layer_offset(m), seed=seed)
        layer = GaussianLayer.from_activated(pts, scales=scale, layer_index=m)
    else:
        layer = init_layer(body, m, joints, n=n, seed=seed)
        layer = GaussianLayer.from_activated(layer.centers, scales=scale, layer_index=m)
    return GaussianLayer.from_activated(
        layer.centers, scales=scale, colors=banded_colors(layer.centers, body),
        opacities=np.full(len(layer), opacity), layer_index=m)


def ring_cameras(n: int, body: ProxyBody | None = None, resolution=(128, 128),
                 elevation_deg: float = 10.0, phase: float = 0.0, prefix: str = "ref") -> list[Camera]:
    body = body or ProxyBody()
    out = []
    for i in range(n):
        az = phase + 2 * np.pi * i / n
        el = np.deg2rad(elevation_deg if i % 2 == 0 else -elevation_deg / 2)
        out.append(orbit_camera(az, el, 2.5 * body.height, tuple(body.center), resolution,
                                id=f"{prefix}-{i}"))
    return out


def reference_views(layer_or_points, cameras, config: RenderConfig = DEFAULT_CONFIG,
                    background: float = 0.0):
    """``(camera, color)`` pairs; ``background`` fills uncovered pixels."""
    pts = layer_or_points.as_points() if hasattr(layer_or_points, "as_points") else layer_or_points
    views = []
    for cam in cameras:
        out = render(pts, cam, config)
        views.append((cam, out.color + background * (1.0 - out.opacity_map[..., None])))
    return views


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak**2 / mse)


DEMO_LAYERS = (
    # prompt, garment preset, hue shift of the banded texture
    ("a person with short hair", "full", 0.0),
    ("a striped shirt", "upper", 0.35),
    ("long trousers", "lower", 0.7),
)


def write_demo_project(root, n_layers: int = 1, views: int = 8, resolution=(64, 64),
                       coarse_iterations: int = 20, fine_iterations: int = 20,
                       densify_rounds: int = 1, n_init: int = 500, seed: int = 0):
    """Reference views for a synthetic 1-3 layer avatar plus a matching run config.

    Returns the path of the written ``config.yaml``.
    """
    import yaml

    from .config import write_reference_dir
    from .core import PointSet

    if not 1 <= n_layers <= len(DEMO_LAYERS):
        raise ValueError(f"demo supports 1..{len(DEMO_LAYERS)} layers")
    root = Path(root)
    body = ProxyBody()
    cams = ring_cameras(views, body, resolution, prefix="ref")
    truth = []
    layers = []
    body_prompt = DEMO_LAYERS[0][0]
    for m in range(1, n_layers + 1):
        prompt, garment, shift = DEMO_LAYERS[m - 1]
        gt = textured_figure(body, n=6000, m=m, joints=None if m == 1 else garment, seed=100 + m)
        gt.color_logits = np.roll(gt.color_logits, int(round(3 * shift)) % 3, axis=1) + shift
        truth.append(gt)
        write_reference_dir(root / f"layer{m}_local", reference_views(gt, cams))
        spec = {
            "prompt": prompt,
            "garment": garment,
            "n_init": n_init,
            "reference": f"layer{m}_local",
            "coarse": {"iterations": coarse_iterations},
            "fine": {"iterations": fine_iterations, "densify_rounds": densify_rounds},
        }
        if m > 1:
            write_reference_dir(root / f"layer{m}_global",
                                reference_views(PointSet.from_layers(truth), cams))
            spec["global_reference"] = f"layer{m}_global"
        layers.append(spec)
    config = {
        "seed": seed,
        "output_dir": "out",
        "resolution": list(resolution),
        "body": {"prompt": body_prompt},
        "guidance": {"backend": "mock"},
        "layers": layers,
        "transfer": {"iterations": 50, "n_views": 8},
    }
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(config, sort_keys=False))
    return path

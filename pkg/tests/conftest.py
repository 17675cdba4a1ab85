import numpy as np
import pytest

from gsavatar.core import Camera, GaussianLayer, PointSet
from gsavatar.render import EXACT_CONFIG, PixelGrads, backward, render


def random_layer(rng, n, spread=0.6, scale_range=(0.03, 0.15), layer_index=1, prompt=""):
    centers = np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(-0.5, 0.5, n)]
    scales = np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), (n, 3)))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianLayer.from_activated(
        centers, scales, quats, rng.uniform(0.05, 0.95, (n, 3)), rng.uniform(0.1, 0.95, n),
        layer_index=layer_index, prompt=prompt)


def random_scene(rng, n, **kw) -> PointSet:
    return random_layer(rng, n, **kw).as_points()


def front_camera(width=64, height=64, distance=3.0, **kw) -> Camera:
    return Camera(position=(0.0, 0.0, distance), look_at=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0),
                  resolution=(width, height), **kw)


def random_pixel_grads(rng, camera) -> PixelGrads:
    h, w = camera.height, camera.width
    return PixelGrads(rng.normal(size=(h, w, 3)), rng.normal(size=(h, w)), 0.1 * rng.normal(size=(h, w)))


def scalar_loss(points, camera, pg: PixelGrads, config=EXACT_CONFIG) -> float:
    out = render(points, camera, config)
    return float(np.sum(out.color * pg.color) + np.sum(out.opacity_map * pg.opacity)
                 + np.sum(out.depth * pg.depth))


FIELD_OF = {"center": "centers", "scale": "log_scales", "rotation": "quats",
            "color": "color_logits", "opacity": "opacity_logits"}


def fd_check(points, camera, pg, h=1e-4, config=EXACT_CONFIG):
    """Largest relative error between analytic and central-difference gradients, per attribute.

    Relative error is ``|a - n| / max(|a|, |n|, floor)`` with ``floor`` equal to
    1e-3 of the largest gradient magnitude of that attribute in the scene, so
    entries that are numerically zero do not divide by zero.
    """
    out = render(points, camera, config)
    grads = backward(points, camera, pg, out).as_dict()
    worst = {}
    for attr, name in FIELD_OF.items():
        base = getattr(points, name)
        analytic = grads[attr].reshape(base.shape)
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sgn in (1, -1):
                arr = np.array(base)
                arr[idx] += sgn * h
                vals.append(scalar_loss(points.replace(**{name: arr}), camera, pg, config))
            numeric[idx] = (vals[0] - vals[1]) / (2 * h)
        floor = max(1e-3 * np.abs(numeric).max(), 1e-8)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst[attr] = float(rel.max())
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

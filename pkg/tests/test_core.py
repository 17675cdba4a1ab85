import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gsavatar.core import (
    Camera,
    ConfigurationError,
    FrozenFlags,
    GaussianLayer,
    GaussianPoint,
    LayeredAvatar,
    compose_prefix,
    covariance_of,
    logit,
    orbit_camera,
    sigmoid,
)

from conftest import random_layer


def point(scale, quat=(1, 0, 0, 0)):
    return GaussianPoint(np.zeros(3), np.asarray(scale, float), np.asarray(quat, float), np.full(3, 0.5), 0.5)


def test_covariance_identity():
    assert np.allclose(covariance_of(point((1, 1, 1))), np.eye(3))


def test_covariance_axis_scale():
    assert np.allclose(covariance_of(point((2, 1, 1))), np.diag([4.0, 1, 1]))


def test_covariance_rotated_90_about_z():
    q = (np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4))
    assert np.allclose(covariance_of(point((2, 1, 1), q)), np.diag([1.0, 4, 1]), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(
    scale=arrays(np.float64, 3, elements=st.floats(1e-3, 10)),
    quat=arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1),
)
def test_covariance_symmetric_pd_with_scale_eigenvalues(scale, quat):
    q = quat / np.linalg.norm(quat)
    sigma = covariance_of(point(scale, q))
    assert np.abs(sigma - sigma.T).max() <= 1e-12 * max(1.0, np.abs(sigma).max())
    np.linalg.cholesky(sigma)
    ev = np.sort(np.linalg.eigvalsh(sigma))
    assert np.allclose(ev, np.sort(scale**2), rtol=1e-9, atol=1e-9 * ev.max())


def test_point_validation():
    with pytest.raises(ValueError):
        point((1, -1, 1))
    with pytest.raises(ValueError):
        point((1, 1, 1), (2, 0, 0, 0))
    with pytest.raises(ValueError):
        GaussianPoint(np.zeros(3), np.ones(3), np.array([1.0, 0, 0, 0]), np.full(3, 0.5), 1.5)


def test_activation_roundtrip_and_clip():
    p = np.array([0.0, 1e-30, 0.25, 0.5, 0.9, 1.0])
    assert np.allclose(sigmoid(logit(p)), p, atol=1e-15)
    assert np.all(np.isfinite(logit(p)))


def test_layer_activated_accessors(rng):
    L = random_layer(rng, 10)
    assert np.all(L.scales > 0)
    assert np.allclose(np.linalg.norm(L.rotations, axis=1), 1)
    assert L.point(3).opacity == pytest.approx(L.opacities[3])


def test_compose_prefix_sizes():
    a = GaussianLayer.from_activated(np.zeros((5, 3)), 0.1, layer_index=1)
    assert len(compose_prefix(LayeredAvatar([a]), 1)) == 5
    big = GaussianLayer.from_activated(np.zeros((5000, 3)), 0.1, layer_index=1)
    mid = GaussianLayer.from_activated(np.ones((3000, 3)), 0.1, layer_index=2)
    assert len(compose_prefix(LayeredAvatar([big, mid]), 2)) == 8000


def test_compose_prefix_order_and_back_references(rng):
    layers = [random_layer(rng, n, layer_index=i + 1) for i, n in enumerate((4, 6, 3))]
    av = LayeredAvatar(list(reversed(layers)))  # sorted on construction
    pts = compose_prefix(av, 2)
    assert np.array_equal(pts.centers, np.concatenate([layers[0].centers, layers[1].centers]))
    assert pts.layer_ids.tolist() == [1] * 4 + [2] * 6
    assert pts.point_ids.tolist() == list(range(4)) + list(range(6))
    for m in range(1, 4):
        assert len(compose_prefix(av, m)) == sum(len(L) for L in layers[:m])
    with pytest.raises(IndexError):
        compose_prefix(av, 0)
    with pytest.raises(IndexError):
        compose_prefix(av, 4)


def test_point_set_is_read_only(rng):
    pts = random_layer(rng, 3).as_points()
    with pytest.raises(ValueError):
        pts.centers[0, 0] = 1.0


def test_avatar_rejects_duplicate_indices(rng):
    with pytest.raises(ValueError):
        LayeredAvatar([random_layer(rng, 2, layer_index=1), random_layer(rng, 2, layer_index=1)])


def test_frozen_presets():
    assert FrozenFlags.transfer().as_tuple() == (False, False, True, True, True)
    assert all(FrozenFlags.all().as_tuple())


def test_quantize_skips_frozen(rng):
    L = random_layer(rng, 5)
    L.frozen = FrozenFlags.transfer()
    before = L.copy()
    L.quantize()
    assert np.array_equal(L.quats, before.quats) and np.array_equal(L.color_logits, before.color_logits)
    assert np.array_equal(L.centers, before.centers.astype(np.float32).astype(np.float64))


@pytest.mark.parametrize("kwargs", [
    dict(near=1.0, far=0.5),
    dict(vertical_fov=0.0),
    dict(vertical_fov=np.pi),
    dict(resolution=(0, 10)),
    dict(up=(0.0, 0.0, 1.0)),  # parallel to the view direction
])
def test_camera_validation(kwargs):
    base = dict(position=(0, 0, 3.0), look_at=(0, 0, 0.0), up=(0, 1.0, 0))
    with pytest.raises(ConfigurationError):
        Camera(**{**base, **kwargs})


def test_camera_frame_and_serialization():
    cam = orbit_camera(0.3, 0.2, 4.0, resolution=(80, 60), id="c")
    W, t = cam.world_to_camera()
    assert np.allclose(W @ W.T, np.eye(3))
    look = W @ np.asarray(cam.look_at) + t
    assert abs(look[0]) < 1e-12 and abs(look[1]) < 1e-12 and look[2] > 0
    assert Camera.from_dict(cam.to_dict()) == cam
    assert cam.focal == pytest.approx(30 / np.tan(np.deg2rad(20)))

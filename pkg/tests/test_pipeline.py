import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsavatar.body import ProxyBody
from gsavatar.core import ConfigurationError, GaussianLayer, LayeredAvatar, PointSet, sigmoid
from gsavatar.guidance import MockBackend
from gsavatar.optim import LayerAdam, cosine_lr
from gsavatar.pipeline import (
    Diverged,
    StageConfig,
    TransferConfig,
    coarse_defaults,
    densify_perturb,
    fine_defaults,
    generate_layer,
    transfer_garment,
)
from gsavatar.synthetic import reference_views, ring_cameras, textured_figure

from conftest import random_layer

BODY = ProxyBody()


def small_stage(iterations, rounds=0, density=1.0, seed=0, **kw):
    return StageConfig(iterations=iterations, densify_rounds=rounds, lambda_density=density,
                       resolution=(32, 32), seed=seed, **kw)


@pytest.fixture(scope="module")
def mock_backend():
    cams = ring_cameras(4, BODY, (32, 32))
    backend = MockBackend.from_views(reference_views(textured_figure(BODY, n=3000, seed=5), cams))
    gt2 = textured_figure(BODY, n=3000, m=2, joints="upper", seed=6)
    truth = PointSet.from_layers([textured_figure(BODY, n=3000, seed=5), gt2])
    backend.add_views(reference_views(gt2, cams), prompt="a shirt")
    backend.add_views(reference_views(truth, cams), prompt="a person, wearing a shirt")
    return backend


# densification

@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 300), seed=st.integers(0, 2**31 - 1))
def test_densify_contract(n, seed):
    L = random_layer(np.random.default_rng(seed), n)
    D = densify_perturb(L, seed=seed)
    assert len(D) == 2 * n
    for name in ("centers", "log_scales", "quats", "color_logits", "opacity_logits"):
        assert np.array_equal(getattr(D, name)[:n], getattr(L, name))
    for name in ("log_scales", "quats", "opacity_logits"):
        assert np.array_equal(getattr(D, name)[n:], getattr(L, name))
    assert np.abs(D.centers[n:] - L.centers).max() <= 0.0005
    dc = sigmoid(D.color_logits[n:]) - sigmoid(L.color_logits)
    assert dc.min() >= -1e-12 and dc.max() <= 0.05 + 1e-12


def test_densify_zero_noise_is_exact_copy(rng):
    L = random_layer(rng, 50)
    D = densify_perturb(L, seed=1, position_noise=0.0, color_noise=(0.0, 0.0))
    for name in ("centers", "log_scales", "quats", "color_logits", "opacity_logits"):
        assert np.array_equal(getattr(D, name)[50:], getattr(L, name))


def test_densify_5000_to_10000():
    L = GaussianLayer.from_activated(np.random.default_rng(0).normal(size=(5000, 3)), 0.02)
    D = densify_perturb(L, seed=0)
    assert len(D) == 10000 and np.array_equal(D.centers[:5000], L.centers)


def test_densify_rejects_empty():
    with pytest.raises(ValueError):
        densify_perturb(GaussianLayer.empty())


# configuration

def test_stage_defaults():
    c, f = coarse_defaults(), fine_defaults()
    assert (c.iterations, c.lambda_density, c.densify_rounds) == (400, 1.0, 0)
    assert (f.iterations, f.lambda_density, f.densify_rounds) == (600, 0.0, 4)
    assert c.cameras_per_step == 2 and c.lambda_local == c.lambda_global == 1.0


@pytest.mark.parametrize("kw", [dict(iterations=-1), dict(lambda_global=-0.1), dict(densify_rounds=-2)])
def test_stage_validation(kw):
    with pytest.raises(ValueError):
        StageConfig(**kw)


def test_transfer_config_has_no_frozen_rates():
    with pytest.raises(TypeError):
        TransferConfig(lr_color=1e-2)


def test_cosine_lr_endpoints():
    assert cosine_lr(1.0, 0, 100) == 1.0
    assert cosine_lr(1.0, 99, 100) == pytest.approx(0.01)


def test_adam_grow_adds_zero_moments(rng):
    L = random_layer(rng, 4)
    opt = LayerAdam(L, {"center": 0.1}, 10)
    opt.step(L, {"center": np.ones((4, 3))})
    opt.grow(4)
    assert opt.m["center"].shape == (8, 3) and not opt.m["center"][4:].any()


# generation

def test_count_grows_5000_to_80000(mock_backend):
    av = generate_layer(LayeredAvatar(), 1, "", mock_backend, small_stage(0), small_stage(4, rounds=4, density=0),
                        body=BODY, n_init=5000)
    assert len(av.layers[0]) == 80000


def test_first_layer_is_deterministic(mock_backend):
    runs = [generate_layer(LayeredAvatar(), 1, "", mock_backend, small_stage(6), small_stage(4, 2, 0),
                           body=BODY, n_init=400) for _ in range(2)]
    a, b = (r.layers[0].params() for r in runs)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    # stored on the float32 grid
    assert np.array_equal(a["center"], a["center"].astype(np.float32).astype(np.float64))


def test_generation_reduces_reconstruction_error(mock_backend):
    hist = []
    generate_layer(LayeredAvatar(), 1, "", mock_backend, small_stage(40), small_stage(0), body=BODY,
                   n_init=800, history=hist)
    first = np.mean([h.sds_norm for h in hist[:5]])
    last = np.mean([h.sds_norm for h in hist[-5:]])
    assert last < first


def test_second_layer_leaves_first_untouched(mock_backend):
    base = generate_layer(LayeredAvatar(body_prompt="a person"), 1, "", mock_backend, small_stage(3),
                          small_stage(0), body=BODY, n_init=500)
    snapshot = base.layers[0].copy()
    hist = []
    av = generate_layer(base, 2, "a shirt", mock_backend, small_stage(5), small_stage(4, 2, 0),
                        body=BODY, joints="upper", n_init=500, history=hist, debug=True)
    assert len(av) == 2
    for k, v in snapshot.params().items():
        assert np.array_equal(av.layers[0].params()[k], v)
        assert np.array_equal(base.layers[0].params()[k], v)
    assert hist and all(h.inner_grad == 0.0 for h in hist)
    assert any(h.sds_norm > 0 for h in hist)


def test_empty_joint_box_is_a_configuration_error(mock_backend):
    with pytest.raises(ConfigurationError, match="l_wrist"):
        generate_layer(LayeredAvatar(), 1, "", mock_backend, small_stage(1, seed=1), small_stage(0),
                       body=BODY, joints=["l_wrist"], n_init=1)


def test_generate_rejects_gap_in_layers(mock_backend):
    with pytest.raises(IndexError):
        generate_layer(LayeredAvatar(), 3, "", mock_backend, small_stage(0), small_stage(0))


def test_exploding_learning_rate_diverges(mock_backend):
    lr = {"center": np.inf, "scale": 5e-3}
    with pytest.raises(Diverged):
        generate_layer(LayeredAvatar(), 1, "", mock_backend, small_stage(3, lr=lr), small_stage(0),
                       body=BODY, n_init=200)


# transfer

@pytest.fixture(scope="module")
def small_avatar():
    body = textured_figure(BODY, n=3000, m=1, scale=0.02)
    garment = textured_figure(BODY, n=1500, m=2, joints="upper", scale=0.02)
    return LayeredAvatar([body]), garment


def test_zero_iteration_transfer_is_identity(small_avatar):
    av, garment = small_avatar
    out = transfer_garment(garment, av, TransferConfig(iterations=0, resolution=(32, 32), n_views=4))
    for k, v in garment.params().items():
        assert np.array_equal(out.params()[k], v)


def test_transfer_keeps_frozen_attributes_bit_equal(small_avatar):
    av, garment = small_avatar
    wide = LayeredAvatar([textured_figure(ProxyBody(girth_scale=1.3), n=3000, scale=0.02)])
    out = transfer_garment(garment, wide, TransferConfig(iterations=5, resolution=(32, 32), n_views=4))
    for k in ("rotation", "color", "opacity"):
        assert np.array_equal(out.params()[k], garment.params()[k])
    assert not np.array_equal(out.centers, garment.centers)
    assert out.layer_index == 2


def test_transfer_divergence_guard(small_avatar):
    av, garment = small_avatar
    with pytest.raises(Diverged, match="10x body box"):
        transfer_garment(garment, av, TransferConfig(iterations=20, lr_center=50.0, resolution=(32, 32),
                                                     n_views=4))


def test_transfer_needs_a_body(small_avatar):
    _, garment = small_avatar
    with pytest.raises(ConfigurationError):
        transfer_garment(garment, LayeredAvatar(), TransferConfig(iterations=1))

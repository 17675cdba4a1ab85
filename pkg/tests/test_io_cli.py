import hashlib
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from gsavatar.body import ProxyBody
from gsavatar.cli import UsageError, main, parse_layers
from gsavatar.config import build_backend, load_config
from gsavatar.core import ConfigurationError, FrozenFlags, LayeredAvatar
from gsavatar.io import (
    AssetError,
    AvatarAsset,
    decode_asset,
    encode_asset,
    load_asset,
    read_png,
    read_pfm,
    save_asset,
    write_png,
    write_pfm,
)
from gsavatar.pipeline import generate_layer
from gsavatar.render import render
from gsavatar.synthetic import ring_cameras, write_demo_project

from conftest import random_layer

DEMO = dict(views=4, resolution=(32, 32), coarse_iterations=3, fine_iterations=4,
            densify_rounds=1, n_init=300)


def sample_asset(rng):
    a = random_layer(rng, 40, layer_index=1, prompt="body")
    b = random_layer(rng, 25, layer_index=2, prompt="a coat")
    b.frozen = FrozenFlags.transfer()
    av = LayeredAvatar([a.quantize(), b.quantize()], body_prompt="someone")
    return AvatarAsset(av, ProxyBody(girth_scale=1.1), {"seed": 3})


# asset format

def test_asset_round_trip_byte_identical(rng, tmp_path):
    asset = sample_asset(rng)
    save_asset(tmp_path / "a.gsav", asset)
    back = load_asset(tmp_path / "a.gsav")
    save_asset(tmp_path / "b.gsav", back)
    assert (tmp_path / "a.gsav").read_bytes() == (tmp_path / "b.gsav").read_bytes()
    for L0, L1 in zip(asset.avatar.layers, back.avatar.layers):
        assert (L0.prompt, L0.layer_index, L0.frozen) == (L1.prompt, L1.layer_index, L1.frozen)
        for k, v in L0.params().items():
            assert np.array_equal(v.astype(np.float32), L1.params()[k])
    assert back.body.girth_scale == 1.1 and back.meta == {"seed": 3}
    assert back.avatar.body_prompt == "someone"


def test_asset_empty_layer_round_trip():
    from gsavatar.core import GaussianLayer

    data = encode_asset(AvatarAsset(LayeredAvatar([GaussianLayer.empty(layer_index=1)])))
    assert encode_asset(decode_asset(data)) == data


@pytest.mark.parametrize("where, message", [
    (0, "magic"), (4, "version"), (20, "header checksum"), (-3, "section checksum"),
])
def test_asset_corruption_detected(rng, where, message):
    data = bytearray(encode_asset(sample_asset(rng)))
    data[where] ^= 0x01
    with pytest.raises(AssetError, match=message):
        decode_asset(bytes(data))


def test_asset_truncated(rng):
    with pytest.raises(AssetError):
        decode_asset(encode_asset(sample_asset(rng))[:-8])
    with pytest.raises(AssetError):
        decode_asset(b"GSA")


def test_pfm_round_trip(rng, tmp_path):
    for img in (rng.random((7, 9)).astype(np.float32), rng.random((5, 6, 3)).astype(np.float32)):
        write_pfm(tmp_path / "x.pfm", img)
        assert np.array_equal(read_pfm(tmp_path / "x.pfm"), img)
    raw = (tmp_path / "x.pfm").read_bytes()
    assert raw.startswith(b"PF\n6 5\n-1.0\n")
    with pytest.raises(ValueError):
        write_pfm(tmp_path / "y.pfm", np.zeros((2, 2, 2)))


def test_png_round_trip(rng, tmp_path):
    img = np.round(rng.random((6, 8, 3)) * 255) / 255
    write_png(tmp_path / "x.png", img)
    assert np.array_equal(read_png(tmp_path / "x.png"), img)


# config

def test_demo_config_parses(tmp_path):
    cfg = load_config(write_demo_project(tmp_path, 2, **DEMO))
    assert [L.garment for L in cfg.layers] == ["full", "upper"]
    assert cfg.layers[1].coarse.seed == 1000 and cfg.layers[1].fine.seed == 1001
    assert cfg.layers[0].coarse.resolution == (32, 32)
    backend = build_backend(cfg)
    assert len(backend.views_for("a striped shirt")) == 4


@pytest.mark.parametrize("edit, message", [
    (lambda c: c.update(colour=1), "unknown top-level"),
    (lambda c: c["layers"][0].update(garment="cape"), "garment preset"),
    (lambda c: c["layers"][0].update(garment=["tail"]), "joint list"),
    (lambda c: c["layers"][0]["coarse"].update(iterations=-1), "coarse"),
    (lambda c: c["layers"][0]["coarse"].update(momentum=0.9), "unknown keys"),
    (lambda c: c["guidance"].update(backend="cloud"), "backend"),
    (lambda c: c.update(layers=[]), "at least one layer"),
    (lambda c: c["layers"][1].pop("global_reference"), "global_reference"),
    (lambda c: c.update(resolution=[0, 32]), "resolution"),
])
def test_config_validation(tmp_path, edit, message):
    path = write_demo_project(tmp_path, 2, **DEMO)
    raw = yaml.safe_load(path.read_text())
    edit(raw)
    path.write_text(yaml.safe_dump(raw))
    with pytest.raises(ConfigurationError, match=message):
        load_config(path)


# CLI

def test_parse_layers():
    assert parse_layers("1..3", [1, 2, 3]) == [1, 2, 3]
    assert parse_layers("3,1", [1, 2, 3]) == [1, 3]
    for bad in ("", "1-3", "x", "4", "3..1"):
        with pytest.raises(UsageError):
            parse_layers(bad, [1, 2, 3])


def test_generate_one_layer(tmp_path, capsys):
    cfg = write_demo_project(tmp_path, 1, **DEMO)
    assert main(["generate", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    asset = load_asset(out / "avatar.gsav")
    assert len(asset.avatar) == 1 and len(asset.avatar.layers[0]) > 0
    assert len(sorted((out / "turntable").glob("layer1_*.png"))) == 8
    assert main(["inspect", str(out / "avatar.gsav")]) == 0
    assert "a person with short hair" in capsys.readouterr().out


def test_generate_missing_reference_dir(tmp_path, capsys):
    cfg = write_demo_project(tmp_path, 1, **DEMO)
    import shutil

    shutil.rmtree(tmp_path / "layer1_local")
    assert main(["generate", "--config", str(cfg)]) == 2
    assert "layer1_local" in capsys.readouterr().err


def test_generate_missing_config(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "nope.yaml")]) == 2


@pytest.fixture(scope="module")
def three_layer(tmp_path_factory):
    root = tmp_path_factory.mktemp("three")
    cfg = write_demo_project(root, 3, **DEMO)
    assert main(["generate", "--config", str(cfg), "--views", "2"]) == 0
    return root, cfg


def test_three_layer_asset_matches_in_memory_generation(three_layer):
    root, cfg_path = three_layer
    asset = load_asset(root / "out" / "avatar.gsav")
    assert [L.layer_index for L in asset.avatar.layers] == [1, 2, 3]
    cfg = load_config(cfg_path)
    backend = build_backend(cfg)
    av = LayeredAvatar(body_prompt=cfg.body_prompt)
    for m, spec in enumerate(cfg.layers, start=1):
        av = generate_layer(av, m, spec.prompt, backend, spec.coarse, spec.fine, body=cfg.body,
                            joints=spec.garment, n_init=spec.n_init)
    cam = ring_cameras(3, cfg.body, (32, 32))[1]
    for m in (1, 2, 3):
        for k, v in av.layer(m).params().items():
            assert np.array_equal(asset.avatar.layer(m).params()[k], v)
        a = render(asset.avatar.select([m]), cam)
        b = render(av.select([m]), cam)
        assert np.array_equal(a.color, b.color) and np.array_equal(a.depth, b.depth)


def test_render_selection_outputs(three_layer, tmp_path):
    root, _ = three_layer
    asset_path = root / "out" / "avatar.gsav"
    asset = load_asset(asset_path)
    assert main(["render", str(asset_path), "--layers", "2", "--views", "2", "--resolution", "24x20",
                 "--out", str(tmp_path / "r")]) == 0
    cams = ring_cameras(2, asset.body, (24, 20), prefix="view")
    ref = render(asset.avatar.select([2]), cams[1])
    assert np.array_equal(read_pfm(tmp_path / "r" / "layers2_01_depth.pfm"), ref.depth.astype(np.float32))
    assert np.array_equal(read_pfm(tmp_path / "r" / "layers2_01_opacity.pfm"),
                          ref.opacity_map.astype(np.float32))
    assert (tmp_path / "r" / "layers2_01.png").is_file()
    # the full prefix selection is the global view
    assert main(["render", str(asset_path), "--layers", "1..3", "--views", "1", "--resolution", "24x20",
                 "--out", str(tmp_path / "g")]) == 0
    full = render(asset.avatar.select([1, 2, 3]), cams[0])
    assert np.array_equal(read_pfm(tmp_path / "g" / "layers1-2-3_00_depth.pfm"), full.depth.astype(np.float32))


@pytest.mark.parametrize("layers", ["", "2..", "7"])
def test_render_bad_selection(three_layer, tmp_path, layers):
    root, _ = three_layer
    assert main(["render", str(root / "out" / "avatar.gsav"), "--layers", layers,
                 "--out", str(tmp_path)]) == 2


def test_render_corrupt_asset(tmp_path):
    (tmp_path / "bad.gsav").write_bytes(b"nonsense")
    assert main(["inspect", str(tmp_path / "bad.gsav")]) == 2


def test_transfer_command(three_layer, tmp_path):
    root, _ = three_layer
    src = root / "out" / "avatar.gsav"
    before = src.read_bytes()
    body_only = tmp_path / "body.gsav"
    asset = load_asset(src)
    save_asset(body_only, AvatarAsset(LayeredAvatar([asset.avatar.layer(1)]), asset.body, {}))
    cfg = tmp_path / "t.yaml"
    cfg.write_text(yaml.safe_dump({
        "layers": [{"prompt": "x"}], "guidance": {"backend": "external"},
        "transfer": {"iterations": 3, "n_views": 4}, "resolution": [32, 32]}))
    out = tmp_path / "fitted.gsav"
    assert main(["transfer", str(src), "2", str(body_only), "--config", str(cfg), "--out", str(out)]) == 0
    fitted = load_asset(out)
    assert [L.layer_index for L in fitted.avatar.layers] == [1, 2]
    assert fitted.avatar.layer(2).frozen == FrozenFlags.transfer()
    assert np.array_equal(fitted.avatar.layer(2).color_logits, asset.avatar.layer(2).color_logits)
    assert src.read_bytes() == before
    assert main(["transfer", str(src), "9", str(body_only), "--out", str(out)]) == 2


def test_transfer_divergence_exit_code(three_layer, tmp_path):
    root, _ = three_layer
    src = root / "out" / "avatar.gsav"
    cfg = tmp_path / "t.yaml"
    cfg.write_text(yaml.safe_dump({
        "layers": [{"prompt": "x"}], "guidance": {"backend": "external"},
        "transfer": {"iterations": 20, "n_views": 4, "lr_center": 50.0}, "resolution": [32, 32]}))
    assert main(["transfer", str(src), "2", str(src), "--config", str(cfg),
                 "--out", str(tmp_path / "x.gsav")]) == 3


def test_generate_identical_across_worker_counts(tmp_path):
    cfg = write_demo_project(tmp_path, 2, **DEMO)
    digests = []
    for n in (1, 4):
        out = tmp_path / f"out{n}"
        env = dict(os.environ, GSAVATAR_THREADS=str(n), NUMBA_NUM_THREADS="4")
        subprocess.run([sys.executable, "-m", "gsavatar.cli", "generate", "--config", str(cfg),
                        "--out", str(out), "--views", "1"], env=env, check=True, capture_output=True)
        digests.append(hashlib.sha256((out / "avatar.gsav").read_bytes()).hexdigest())
        assert sorted(p.name for p in (out / "turntable").iterdir()) == ["layer1_00.png", "layer2_00.png"]
    assert digests[0] == digests[1]
    assert (Path(tmp_path / "out1" / "turntable" / "layer2_00.png").read_bytes()
            == Path(tmp_path / "out4" / "turntable" / "layer2_00.png").read_bytes())

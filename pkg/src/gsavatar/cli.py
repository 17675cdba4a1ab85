"""Command-line interface: ``gsavatar {generate,transfer,render,inspect}``.

Exit codes: 0 success, 2 invalid input (config, asset, selection), 3 the
optimization diverged.  ``GSAVATAR_THREADS`` sets the renderer's worker count.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

import numpy as np

from .body import ProxyBody
from .core import ConfigurationError, LayeredAvatar, PointSet
from .io import AssetError, AvatarAsset, load_asset, save_asset, write_pfm, write_png
from .render import render
from .synthetic import ring_cameras

log = logging.getLogger("gsavatar")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


def parse_resolution(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if not m or min(int(m.group(1)), int(m.group(2))) < 1:
        raise argparse.ArgumentTypeError(f"resolution must look like 128x128, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def parse_layers(text: str, available: list[int]) -> list[int]:
    """``"1..3"``, ``"2"`` or ``"1,3"``; indices refer to layer numbers in the asset."""
    text = text.strip()
    if not text:
        raise UsageError("empty layer selection")
    chosen: list[int] = []
    for part in text.split(","):
        part = part.strip()
        m = re.fullmatch(r"(\d+)\s*\.\.\s*(\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if lo > hi:
                raise UsageError(f"empty range {part!r}")
            chosen.extend(range(lo, hi + 1))
        elif re.fullmatch(r"\d+", part):
            chosen.append(int(part))
        else:
            raise UsageError(f"bad layer selection {part!r} (use e.g. 1..3, 2 or 1,3)")
    missing = sorted(set(chosen) - set(available))
    if missing:
        raise UsageError(f"layers {missing} not in asset (has {available})")
    return sorted(set(chosen))


def _load(path) -> AvatarAsset:
    if not Path(path).is_file():
        raise UsageError(f"asset {path} not found")
    try:
        return load_asset(path)
    except (AssetError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _write_views(points: PointSet, cameras, out_dir: Path, stem: str, depth_maps: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, cam in enumerate(cameras):
        res = render(points, cam)
        write_png(out_dir / f"{stem}_{k:02d}.png", res.color)
        if depth_maps:
            write_pfm(out_dir / f"{stem}_{k:02d}_depth.pfm", res.depth)
            write_pfm(out_dir / f"{stem}_{k:02d}_opacity.pfm", res.opacity_map)


def cmd_generate(args) -> int:
    from .config import build_backend, load_config
    from .pipeline import generate_layer

    cfg = load_config(args.config).with_overrides(args.seed, args.resolution, args.out)
    backend = build_backend(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    avatar = LayeredAvatar(body_prompt=cfg.body_prompt)
    for m, spec in enumerate(cfg.layers, start=1):
        log.info("layer %d: %r (%s)", m, spec.prompt, spec.garment)
        avatar = generate_layer(avatar, m, spec.prompt, backend, spec.coarse, spec.fine,
                                body=cfg.body, joints=spec.garment, n_init=spec.n_init)
        cams = ring_cameras(args.views, cfg.body, cfg.resolution, prefix="turntable")
        _write_views(PointSet.from_layers(avatar.layers), cams, out / "turntable", f"layer{m}", False)
    save_asset(out / "avatar.gsav", AvatarAsset(avatar, cfg.body, {"seed": cfg.seed}))
    print(out / "avatar.gsav")
    return EXIT_OK


def cmd_transfer(args) -> int:
    from .config import load_config
    from .pipeline import TransferConfig, transfer_garment

    source = _load(args.source)
    target = _load(args.target)
    indices = [L.layer_index for L in source.avatar.layers]
    if args.layer not in indices:
        raise UsageError(f"layer {args.layer} not in source asset (has {indices})")
    if args.config:
        tcfg = load_config(args.config).with_overrides(args.seed, args.resolution).transfer
    else:
        import dataclasses
        tcfg = TransferConfig()
        if args.seed is not None:
            tcfg = dataclasses.replace(tcfg, seed=args.seed)
        if args.resolution is not None:
            tcfg = dataclasses.replace(tcfg, resolution=args.resolution)
    fitted = transfer_garment(source.avatar.layer(args.layer), target.avatar, tcfg)
    avatar = target.avatar.copy()
    avatar.add_layer(fitted)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(target.meta, transferred_from=str(args.source), transferred_layer=args.layer)
    save_asset(out, AvatarAsset(avatar, target.body, meta))
    print(out)
    return EXIT_OK


def cmd_render(args) -> int:
    asset = _load(args.asset)
    available = [L.layer_index for L in asset.avatar.layers]
    selection = parse_layers(args.layers, available) if args.layers is not None else available
    points = asset.avatar.select(selection)
    body = asset.body or _body_from_points(points)
    resolution = args.resolution or (128, 128)
    cams = ring_cameras(args.views, body, resolution, prefix="view")
    stem = "layers" + "-".join(str(i) for i in selection)
    _write_views(points, cams, Path(args.out), stem, True)
    print(args.out)
    return EXIT_OK


def _body_from_points(points: PointSet) -> ProxyBody:
    # no stored body: pick a height scale that frames the points
    span = float(np.ptp(points.centers[:, 1])) if len(points) else 1.7
    return ProxyBody(height_scale=max(span / ProxyBody().height, 1e-3))


def cmd_inspect(args) -> int:
    asset = _load(args.asset)
    body = asset.body.to_dict() if asset.body else None
    print(f"asset: {args.asset}")
    print(f"body prompt: {asset.avatar.body_prompt!r}  body: {body}  meta: {asset.meta}")
    print(f"{'layer':>5} {'points':>8} {'frozen':<36} prompt")
    for L in asset.avatar.layers:
        frozen = ",".join(a for a, f in zip(("center", "scale", "rotation", "color", "opacity"),
                                             L.frozen.as_tuple()) if f) or "-"
        print(f"{L.layer_index:>5} {len(L):>8} {frozen:<36} {L.prompt!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsavatar", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate every layer listed in a run config")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory (overrides the config)")
    g.add_argument("--views", type=int, default=8, help="turntable views per layer")
    g.add_argument("--resolution", type=parse_resolution, help="WxH")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("transfer", help="fit a garment layer from one asset onto another avatar")
    t.add_argument("source")
    t.add_argument("layer", type=int)
    t.add_argument("target")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="output asset path")
    t.add_argument("--resolution", type=parse_resolution, help="WxH")
    t.set_defaults(func=cmd_transfer)

    r = sub.add_parser("render", help="render a layer selection on a camera ring")
    r.add_argument("asset")
    r.add_argument("--layers", help="e.g. 1..3, 2 or 1,3 (default: all)")
    r.add_argument("--views", type=int, default=8)
    r.add_argument("--resolution", type=parse_resolution, help="WxH")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    i = sub.add_parser("inspect", help="print the asset's layer table")
    i.add_argument("asset")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    from .pipeline import Diverged

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "views", 1) < 1:
        print("error: --views must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Diverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

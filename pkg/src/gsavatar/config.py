"""YAML run configuration.

Example::

    seed: 0
    output_dir: out
    resolution: [128, 128]        # width, height of sampled training views
    body: {prompt: "a person", height_scale: 1.0, girth_scale: 1.0}
    guidance: {backend: mock}     # or {backend: external, host: ..., port: ...}
    layers:
      - prompt: "a person"
        garment: full             # preset name or explicit joint list
        reference: refs/body      # mock only: views of this layer alone
      - prompt: "a red shirt"
        garment: upper
        reference: refs/shirt
        global_reference: refs/shirt_on_body   # mock only: views of layers 1..m
        coarse: {iterations: 200}
        fine: {iterations: 300, densify_rounds: 4}
    transfer: {iterations: 300, lambda_vis: 1.0}

Relative paths are resolved against the directory holding the file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .body import GARMENT_PRESETS, JOINT_NAMES, ProxyBody
from .core import Camera, ConfigurationError
from .guidance import ExternalBackend, MockBackend, global_prompt
from .io import read_image, write_pfm
from .pipeline import StageConfig, TransferConfig, coarse_defaults, fine_defaults

REFERENCE_INDEX = "cameras.json"


@dataclass
class LayerSpec:
    prompt: str
    garment: object = "full"  # preset name or tuple of joint names
    n_init: int = 5000
    coarse: StageConfig = field(default_factory=coarse_defaults)
    fine: StageConfig = field(default_factory=fine_defaults)
    reference: Optional[Path] = None
    global_reference: Optional[Path] = None


@dataclass
class GuidanceSpec:
    backend: str = "mock"
    host: str = "127.0.0.1"
    port: int = 7860
    timeout: float = 60.0


@dataclass
class RunConfig:
    layers: list
    body: ProxyBody = field(default_factory=ProxyBody)
    body_prompt: str = ""
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    output_dir: Path = Path("out")
    seed: int = 0
    resolution: tuple = (128, 128)

    def with_overrides(self, seed=None, resolution=None, output_dir=None) -> "RunConfig":
        cfg = dataclasses.replace(self)
        if seed is not None:
            cfg.seed = int(seed)
        if resolution is not None:
            cfg.resolution = tuple(resolution)
        if output_dir is not None:
            cfg.output_dir = Path(output_dir)
        cfg.layers = [dataclasses.replace(
            L,
            coarse=dataclasses.replace(L.coarse, seed=cfg.seed + 1000 * i, resolution=cfg.resolution),
            fine=dataclasses.replace(L.fine, seed=cfg.seed + 1000 * i + 1, resolution=cfg.resolution),
        ) for i, L in enumerate(self.layers)]
        cfg.transfer = dataclasses.replace(self.transfer, seed=cfg.seed, resolution=cfg.resolution)
        return cfg


def _stage(raw, base: StageConfig, where: str) -> StageConfig:
    raw = dict(raw or {})
    names = {f.name for f in dataclasses.fields(StageConfig)} - {"seed", "resolution"}
    unknown = set(raw) - names
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    if "lr" in raw:
        raw["lr"] = {**base.lr, **raw["lr"]}
    try:
        return dataclasses.replace(base, **raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def _garment(value, where: str):
    if isinstance(value, str):
        if value not in GARMENT_PRESETS:
            raise ConfigurationError(f"{where}: unknown garment preset {value!r} "
                                     f"(choose from {sorted(GARMENT_PRESETS)})")
        return value
    joints = tuple(value)
    bad = [j for j in joints if j not in JOINT_NAMES]
    if bad or not joints:
        raise ConfigurationError(f"{where}: unknown or empty joint list {bad or joints}")
    return joints


def parse_config(raw: dict, base_dir=".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a mapping")
    base_dir = Path(base_dir)
    known = {"seed", "output_dir", "resolution", "body", "guidance", "layers", "transfer"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown top-level keys {sorted(unknown)}")

    body_raw = dict(raw.get("body") or {})
    body_prompt = str(body_raw.pop("prompt", ""))
    try:
        body = ProxyBody(**body_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"body: {exc}") from exc

    guidance_raw = dict(raw.get("guidance") or {})
    try:
        guidance = GuidanceSpec(**guidance_raw)
    except TypeError as exc:
        raise ConfigurationError(f"guidance: {exc}") from exc
    if guidance.backend not in ("mock", "external"):
        raise ConfigurationError(f"guidance.backend must be mock or external, not {guidance.backend!r}")

    layers_raw = raw.get("layers") or []
    if not layers_raw:
        raise ConfigurationError("config needs at least one layer")
    layers = []
    for i, lr in enumerate(layers_raw, start=1):
        where = f"layers[{i}]"
        lr = dict(lr)
        if "prompt" not in lr:
            raise ConfigurationError(f"{where}: missing prompt")
        extra = set(lr) - {f.name for f in dataclasses.fields(LayerSpec)}
        if extra:
            raise ConfigurationError(f"{where}: unknown keys {sorted(extra)}")
        spec = LayerSpec(
            prompt=str(lr["prompt"]),
            garment=_garment(lr.get("garment", "full"), where),
            n_init=int(lr.get("n_init", 5000)),
            coarse=_stage(lr.get("coarse"), coarse_defaults(), f"{where}.coarse"),
            fine=_stage(lr.get("fine"), fine_defaults(), f"{where}.fine"),
        )
        for key in ("reference", "global_reference"):
            if lr.get(key) is not None:
                setattr(spec, key, (base_dir / lr[key]).resolve())
        if guidance.backend == "mock":
            if spec.reference is None:
                raise ConfigurationError(f"{where}: mock guidance needs a reference directory")
            needs_global = i > 1 and spec.coarse.lambda_global + spec.fine.lambda_global > 0
            if needs_global and spec.global_reference is None:
                raise ConfigurationError(f"{where}: mock dual guidance needs global_reference")
            for key in ("reference", "global_reference"):
                path = getattr(spec, key)
                if path is not None and not (path / REFERENCE_INDEX).is_file():
                    raise ConfigurationError(f"{where}.{key}: reference directory {path} "
                                             f"not found or has no {REFERENCE_INDEX}")
        layers.append(spec)

    transfer_raw = dict(raw.get("transfer") or {})
    try:
        transfer = TransferConfig(**transfer_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"transfer: {exc}") from exc

    res = raw.get("resolution", [128, 128])
    if len(res) != 2 or min(int(r) for r in res) < 1:
        raise ConfigurationError(f"resolution must be [width, height], got {res}")
    cfg = RunConfig(layers, body, body_prompt, guidance, transfer,
                    (base_dir / raw.get("output_dir", "out")).resolve(), int(raw.get("seed", 0)),
                    (int(res[0]), int(res[1])))
    return cfg.with_overrides()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return parse_config(raw, path.parent)


# --- mock reference directories ------------------------------------------------


def write_reference_dir(path, views) -> None:
    """Store ``(camera, image)`` pairs as PFM files plus a camera index."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    for k, (cam, image) in enumerate(views):
        name = f"view_{k:03d}.pfm"
        write_pfm(path / name, image)
        index.append({"camera": cam.to_dict(), "image": name})
    (path / REFERENCE_INDEX).write_text(json.dumps({"views": index}, indent=1))


def read_reference_dir(path) -> list:
    path = Path(path)
    index_path = path / REFERENCE_INDEX
    if not index_path.is_file():
        raise ConfigurationError(f"reference directory {path} not found or has no {REFERENCE_INDEX}")
    index = json.loads(index_path.read_text())
    views = []
    for entry in index["views"]:
        image_path = path / entry["image"]
        if not image_path.is_file():
            raise ConfigurationError(f"reference image {image_path} missing")
        views.append((Camera.from_dict(entry["camera"]), read_image(image_path)))
    return views


def build_backend(cfg: RunConfig):
    if cfg.guidance.backend == "external":
        return ExternalBackend(cfg.guidance.host, cfg.guidance.port, cfg.guidance.timeout)
    backend = MockBackend()
    for m, spec in enumerate(cfg.layers, start=1):
        try:
            backend.add_views(read_reference_dir(spec.reference), spec.prompt)
            if spec.global_reference is not None:
                backend.add_views(read_reference_dir(spec.global_reference),
                                  global_prompt(cfg.body_prompt, spec.prompt))
        except ValueError as exc:
            raise ConfigurationError(f"layers[{m}]: {exc}") from exc
    return backend

"""Avatar asset container plus PNG/PFM image files.

Asset layout (all integers little-endian)::

    b"GSAV" | u32 version | u32 header_len | u32 header_crc32 | header JSON | data

The UTF-8 JSON header carries avatar metadata and a table of contents with one
entry per layer: prompt, layer index, frozen flags, point count, and the
offset/length/CRC32 of the layer's section inside ``data``.  A section is the
five parameter arrays (center, log-scale, quaternion, color logit, opacity
logit) stored back to back as float32.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .body import ProxyBody
from .core import ATTRIBUTES, FrozenFlags, GaussianLayer, LayeredAvatar

MAGIC = b"GSAV"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIII")
_ARRAYS = (("centers", 3), ("log_scales", 3), ("quats", 4), ("color_logits", 3), ("opacity_logits", 1))
_F32 = np.dtype("<f4")


class AssetError(ValueError):
    pass


@dataclass
class AvatarAsset:
    avatar: LayeredAvatar
    body: Optional[ProxyBody] = None
    meta: dict = field(default_factory=dict)


def _layer_bytes(layer: GaussianLayer) -> bytes:
    return b"".join(np.ascontiguousarray(getattr(layer, name), dtype=_F32).tobytes()
                    for name, _ in _ARRAYS)


def encode_asset(asset: AvatarAsset) -> bytes:
    toc = []
    sections = []
    offset = 0
    for layer in asset.avatar.layers:
        blob = _layer_bytes(layer)
        toc.append({
            "layer_index": layer.layer_index,
            "prompt": layer.prompt,
            "frozen": [a for a in ATTRIBUTES if getattr(layer.frozen, a)],
            "count": len(layer),
            "offset": offset,
            "nbytes": len(blob),
            "crc32": zlib.crc32(blob),
        })
        sections.append(blob)
        offset += len(blob)
    header = {
        "body_prompt": asset.avatar.body_prompt,
        "body": asset.body.to_dict() if asset.body is not None else None,
        "meta": asset.meta,
        "layers": toc,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, VERSION, len(raw), zlib.crc32(raw)) + raw + b"".join(sections)


def decode_asset(data: bytes) -> AvatarAsset:
    if len(data) < _PREAMBLE.size:
        raise AssetError("file too short for an avatar asset")
    magic, version, n, crc = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise AssetError(f"bad magic {magic!r}")
    if version != VERSION:
        raise AssetError(f"unsupported asset version {version}")
    raw = data[_PREAMBLE.size:_PREAMBLE.size + n]
    if len(raw) != n or zlib.crc32(raw) != crc:
        raise AssetError("header checksum mismatch")
    header = json.loads(raw.decode("utf-8"))
    body_data = data[_PREAMBLE.size + n:]
    layers = []
    for entry in header["layers"]:
        blob = body_data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(blob) != entry["nbytes"] or zlib.crc32(blob) != entry["crc32"]:
            raise AssetError(f"layer {entry['layer_index']}: section checksum mismatch")
        count = entry["count"]
        if entry["nbytes"] != count * 14 * _F32.itemsize:
            raise AssetError(f"layer {entry['layer_index']}: size does not match {count} points")
        arrays = {}
        pos = 0
        for name, width in _ARRAYS:
            k = count * width
            arrays[name] = np.frombuffer(blob, _F32, k, pos * _F32.itemsize).astype(np.float64)
            pos += k
        frozen = FrozenFlags(**{a: a in entry["frozen"] for a in ATTRIBUTES})
        layers.append(GaussianLayer(**arrays, layer_index=entry["layer_index"],
                                    prompt=entry["prompt"], frozen=frozen))
    body = ProxyBody(**header["body"]) if header.get("body") else None
    return AvatarAsset(LayeredAvatar(layers, header.get("body_prompt", "")), body, header.get("meta", {}))


def save_asset(path, asset: AvatarAsset) -> None:
    Path(path).write_bytes(encode_asset(asset))


def load_asset(path) -> AvatarAsset:
    return decode_asset(Path(path).read_bytes())


# --- images --------------------------------------------------------------------


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(path)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM; rows are stored bottom-to-top as the format requires."""
    img = np.asarray(image, dtype=_F32)
    if img.ndim == 2:
        kind = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        kind = b"PF"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(kind + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
        ch = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * ch)
    shape = (h, w, 3) if ch == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_png(path)

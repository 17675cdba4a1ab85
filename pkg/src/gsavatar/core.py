"""Scene data model: Gaussian points, layers, layered avatars and cameras.

Layers store parameters in their optimizable (pre-activation) form:

* ``centers``         world-space means, ``(N, 3)``
* ``log_scales``      log of per-axis standard deviations, ``(N, 3)``
* ``quats``           unnormalized quaternions ``(w, x, y, z)``, ``(N, 4)``
* ``color_logits``    sigmoid pre-activation of RGB, ``(N, 3)``
* ``opacity_logits``  sigmoid pre-activation of opacity, ``(N,)``

Activated values (``scales``, ``rotations``, ``colors``, ``opacities``) are
derived on read, so gradient steps can never leave the valid range.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

ATTRIBUTES = ("center", "scale", "rotation", "color", "opacity")

# sigmoid(40.0) == 1.0 exactly in float64, so this bound still reaches both ends
LOGIT_CLIP = 40.0


class ConfigurationError(ValueError):
    """Invalid scene or camera configuration."""


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = np.log(p) - np.log1p(-p)
    return np.clip(out, -LOGIT_CLIP, LOGIT_CLIP)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (possibly unnormalized) ``(..., 4)`` quaternions."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariances(log_scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """Batched ``R diag(s^2) R^T`` for ``(N, 3)`` log-scales and ``(N, 4)`` quaternions."""
    R = quat_to_rotmat(quats)
    s2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    return np.einsum("nij,nj,nkj->nik", R, s2, R)


@dataclass(frozen=True)
class GaussianPoint:
    """A single anisotropic Gaussian in activated form."""

    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity: float

    def __post_init__(self):
        for name in ("center", "scale", "rotation", "color"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        vals = np.concatenate(
            [self.center, self.scale, self.rotation, self.color, [self.opacity]]
        )
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("GaussianPoint has non-finite fields")
        if np.any(self.scale <= 0):
            raise ValueError(f"scale must be strictly positive, got {self.scale}")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation must be a unit quaternion")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"opacity {self.opacity} outside [0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError(f"color {self.color} outside [0, 1]")


def covariance_of(point: GaussianPoint) -> np.ndarray:
    """3x3 covariance ``R diag(scale^2) R^T`` of a single point."""
    return covariances(np.log(point.scale)[None], point.rotation[None])[0]


@dataclass
class FrozenFlags:
    center: bool = False
    scale: bool = False
    rotation: bool = False
    color: bool = False
    opacity: bool = False

    @classmethod
    def all(cls) -> "FrozenFlags":
        return cls(True, True, True, True, True)

    @classmethod
    def transfer(cls) -> "FrozenFlags":
        # only position and scale adapt to the new body
        return cls(center=False, scale=False, rotation=True, color=True, opacity=True)

    def as_tuple(self) -> tuple[bool, ...]:
        return tuple(getattr(self, a) for a in ATTRIBUTES)


@dataclass
class GaussianLayer:
    centers: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    color_logits: np.ndarray
    opacity_logits: np.ndarray
    layer_index: int = 1
    prompt: str = ""
    frozen: FrozenFlags = field(default_factory=FrozenFlags)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.color_logits = np.asarray(self.color_logits, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        if self.layer_index < 1:
            raise ValueError("layer_index must be >= 1")

    @classmethod
    def from_activated(
        cls,
        centers,
        scales,
        rotations=None,
        colors=None,
        opacities=None,
        **meta,
    ) -> "GaussianLayer":
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        n = len(centers)
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
        if rotations is None:
            rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        if colors is None:
            colors = np.full((n, 3), 0.5)
        if opacities is None:
            opacities = np.full(n, 0.7)
        return cls(
            centers=centers.copy(),
            log_scales=np.log(scales),
            quats=np.broadcast_to(np.asarray(rotations, dtype=np.float64), (n, 4)).copy(),
            color_logits=logit(np.broadcast_to(colors, (n, 3))),
            opacity_logits=logit(np.broadcast_to(opacities, (n,))),
            **meta,
        )

    @classmethod
    def empty(cls, **meta) -> "GaussianLayer":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                   np.zeros((0, 3)), np.zeros(0), **meta)

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def rotations(self) -> np.ndarray:
        return self.quats / np.linalg.norm(self.quats, axis=1, keepdims=True)

    @property
    def colors(self) -> np.ndarray:
        return sigmoid(self.color_logits)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def point(self, i: int) -> GaussianPoint:
        return GaussianPoint(self.centers[i], self.scales[i], self.rotations[i],
                             self.colors[i], float(self.opacities[i]))

    def __iter__(self) -> Iterator[GaussianPoint]:
        for i in range(len(self)):
            yield self.point(i)

    def params(self) -> dict[str, np.ndarray]:
        return {
            "center": self.centers,
            "scale": self.log_scales,
            "rotation": self.quats,
            "color": self.color_logits,
            "opacity": self.opacity_logits,
        }

    def copy(self, **changes) -> "GaussianLayer":
        out = dataclasses.replace(
            self,
            centers=self.centers.copy(),
            log_scales=self.log_scales.copy(),
            quats=self.quats.copy(),
            color_logits=self.color_logits.copy(),
            opacity_logits=self.opacity_logits.copy(),
            frozen=dataclasses.replace(self.frozen),
        )
        for k, v in changes.items():
            setattr(out, k, v)
        return out

    def quantize(self) -> "GaussianLayer":
        """Round unfrozen parameters onto the float32 grid used by the asset format (in place).

        Frozen arrays are left untouched so they stay bit-equal to their source.
        """
        fields = dict(zip(ATTRIBUTES, ("centers", "log_scales", "quats", "color_logits", "opacity_logits")))
        for attr, name in fields.items():
            if not getattr(self.frozen, attr):
                setattr(self, name, getattr(self, name).astype("<f4").astype(np.float64))
        return self

    def as_points(self) -> "PointSet":
        return PointSet.from_layers([self])


@dataclass(frozen=True, eq=False)
class PointSet:
    """Flat, read-only snapshot of Gaussians handed to the renderer.

    ``layer_ids``/``point_ids`` refer back to the owning layer so gradients can be
    routed; ``frozen`` holds one row of per-attribute flags (see ``ATTRIBUTES``).
    """

    centers: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    color_logits: np.ndarray
    opacity_logits: np.ndarray
    layer_ids: np.ndarray
    point_ids: np.ndarray
    frozen: np.ndarray

    def __post_init__(self):
        for f in dataclasses.fields(self):
            getattr(self, f.name).flags.writeable = False

    @classmethod
    def from_layers(cls, layers: Sequence[GaussianLayer]) -> "PointSet":
        def cat(name, width):
            parts = [getattr(L, name) for L in layers]
            if not parts:
                return np.zeros((0, width) if width else (0,))
            return np.concatenate(parts).astype(np.float64, copy=True)

        return cls(
            centers=cat("centers", 3),
            log_scales=cat("log_scales", 3),
            quats=cat("quats", 4),
            color_logits=cat("color_logits", 3),
            opacity_logits=cat("opacity_logits", 0),
            layer_ids=np.concatenate(
                [np.full(len(L), L.layer_index, dtype=np.int64) for L in layers]
                or [np.zeros(0, dtype=np.int64)]),
            point_ids=np.concatenate(
                [np.arange(len(L), dtype=np.int64) for L in layers]
                or [np.zeros(0, dtype=np.int64)]),
            frozen=np.concatenate(
                [np.tile(np.array(L.frozen.as_tuple()), (len(L), 1)) for L in layers]
                or [np.zeros((0, 5), dtype=bool)]),
        )

    @classmethod
    def from_arrays(cls, centers, log_scales, quats, color_logits, opacity_logits) -> "PointSet":
        layer = GaussianLayer(centers, log_scales, quats, color_logits, opacity_logits)
        return cls.from_layers([layer])

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def colors(self) -> np.ndarray:
        return sigmoid(self.color_logits)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def params(self) -> dict[str, np.ndarray]:
        return {
            "center": self.centers,
            "scale": self.log_scales,
            "rotation": self.quats,
            "color": self.color_logits,
            "opacity": self.opacity_logits,
        }

    def replace(self, **arrays) -> "PointSet":
        return dataclasses.replace(self, **arrays)

    def permuted(self, perm: np.ndarray) -> "PointSet":
        return PointSet(**{f.name: getattr(self, f.name)[perm] for f in dataclasses.fields(self)})


@dataclass
class LayeredAvatar:
    layers: list[GaussianLayer] = field(default_factory=list)
    body_prompt: str = ""

    def __post_init__(self):
        self.layers = sorted(self.layers, key=lambda L: L.layer_index)
        idx = [L.layer_index for L in self.layers]
        if len(set(idx)) != len(idx):
            raise ValueError(f"duplicate layer indices {idx}")

    def __len__(self) -> int:
        return len(self.layers)

    def layer(self, m: int) -> GaussianLayer:
        for L in self.layers:
            if L.layer_index == m:
                return L
        raise IndexError(f"no layer with index {m}")

    def add_layer(self, layer: GaussianLayer) -> None:
        if any(L.layer_index == layer.layer_index for L in self.layers):
            raise ValueError(f"layer {layer.layer_index} already present")
        self.layers.append(layer)
        self.layers.sort(key=lambda L: L.layer_index)

    def set_layer(self, layer: GaussianLayer) -> None:
        self.layers = [L for L in self.layers if L.layer_index != layer.layer_index]
        self.add_layer(layer)

    def copy(self) -> "LayeredAvatar":
        return LayeredAvatar([L.copy() for L in self.layers], self.body_prompt)

    def select(self, indices: Sequence[int]) -> PointSet:
        return PointSet.from_layers([self.layer(m) for m in indices])


def compose_prefix(avatar: LayeredAvatar, m: int) -> PointSet:
    """Union of layers ``1..m`` (by position in the stack), inner layers first."""
    if not 1 <= m <= len(avatar.layers):
        raise IndexError(f"layer prefix {m} out of range 1..{len(avatar.layers)}")
    return PointSet.from_layers(avatar.layers[:m])


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; camera frame is x right, y down, z forward."""

    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    vertical_fov: float = np.deg2rad(40.0)
    resolution: tuple[int, int] = (128, 128)
    near: float = 0.05
    far: float = 100.0
    id: str = ""

    def __post_init__(self):
        for name in ("position", "look_at", "up"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3 or not np.all(np.isfinite(v)):
                raise ConfigurationError(f"camera {name} must be a finite 3-vector")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "resolution", tuple(int(x) for x in self.resolution))
        if not 0 < self.near < self.far:
            raise ConfigurationError("camera requires 0 < near < far")
        if not 0 < self.vertical_fov < np.pi:
            raise ConfigurationError("vertical_fov must lie in (0, pi)")
        if min(self.resolution) < 1:
            raise ConfigurationError("resolution must be at least 1x1")
        fwd = np.subtract(self.look_at, self.position)
        if np.linalg.norm(fwd) == 0:
            raise ConfigurationError("camera position coincides with look_at")
        if np.linalg.norm(np.cross(fwd / np.linalg.norm(fwd), self.up)) < 1e-9:
            raise ConfigurationError("view direction parallel to up vector")

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def focal(self) -> float:
        return 0.5 * self.height / np.tan(0.5 * self.vertical_fov)

    @property
    def principal_point(self) -> tuple[float, float]:
        return 0.5 * self.width, 0.5 * self.height

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """Rotation ``W`` and translation ``t`` with ``x_cam = W @ x_world + t``."""
        pos = np.array(self.position)
        fwd = np.array(self.look_at) - pos
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        W = np.stack([right, down, fwd])
        return W, -W @ pos

    def translated(self, offset) -> "Camera":
        offset = np.asarray(offset, dtype=np.float64)
        return dataclasses.replace(
            self,
            position=tuple(np.add(self.position, offset)),
            look_at=tuple(np.add(self.look_at, offset)),
        )

    def with_resolution(self, width: int, height: int) -> "Camera":
        return dataclasses.replace(self, resolution=(width, height))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "position": list(self.position),
            "look_at": list(self.look_at),
            "up": list(self.up),
            "vertical_fov": float(self.vertical_fov),
            "resolution": list(self.resolution),
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            position=d["position"],
            look_at=d["look_at"],
            up=d.get("up", (0.0, 1.0, 0.0)),
            vertical_fov=d.get("vertical_fov", np.deg2rad(40.0)),
            resolution=tuple(d.get("resolution", (128, 128))),
            near=d.get("near", 0.05),
            far=d.get("far", 100.0),
            id=str(d.get("id", "")),
        )


def orbit_camera(
    azimuth: float,
    elevation: float,
    radius: float,
    target=(0.0, 0.85, 0.0),
    resolution=(128, 128),
    fov: float = np.deg2rad(40.0),
    id: str = "",
) -> Camera:
    """Camera on a sphere around ``target``; azimuth 0 looks along -z from +z."""
    target = np.asarray(target, dtype=np.float64)
    offset = radius * np.array([
        np.cos(elevation) * np.sin(azimuth),
        np.sin(elevation),
        np.cos(elevation) * np.cos(azimuth),
    ])
    return Camera(tuple(target + offset), tuple(target), (0.0, 1.0, 0.0), fov,
                  tuple(resolution), id=id)

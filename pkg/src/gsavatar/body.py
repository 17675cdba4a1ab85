"""Capsule-skeleton proxy body: surface sampling, joints and joint boxes.

A stand-in for a parametric human mesh.  Each bone is a capsule (segment plus
radius); the body surface is the boundary of the union of all capsules.  At
``height_scale = girth_scale = 1`` the figure is 1.7 units tall, standing on
``y = 0`` and facing +z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GaussianLayer

JOINT_NAMES = (
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
)

# (x, y, z) at unit scales; the figure's left is +x
DEFAULT_JOINTS = {
    "pelvis": (0.0, 0.95, 0.0),
    "spine": (0.0, 1.20, 0.0),
    "neck": (0.0, 1.45, 0.0),
    "head": (0.0, 1.605, 0.0),
    "l_shoulder": (0.18, 1.42, 0.0),
    "l_elbow": (0.22, 1.14, 0.0),
    "l_wrist": (0.24, 0.88, 0.0),
    "r_shoulder": (-0.18, 1.42, 0.0),
    "r_elbow": (-0.22, 1.14, 0.0),
    "r_wrist": (-0.24, 0.88, 0.0),
    "l_hip": (0.09, 0.90, 0.0),
    "l_knee": (0.10, 0.50, 0.0),
    "l_ankle": (0.10, 0.05, 0.0),
    "r_hip": (-0.09, 0.90, 0.0),
    "r_knee": (-0.10, 0.50, 0.0),
    "r_ankle": (-0.10, 0.05, 0.0),
}

# (parent, child, radius at girth 1); the tree is rooted at the pelvis
DEFAULT_BONES = (
    ("pelvis", "spine", 0.13),
    ("spine", "neck", 0.14),
    ("neck", "head", 0.095),
    ("neck", "l_shoulder", 0.055),
    ("l_shoulder", "l_elbow", 0.045),
    ("l_elbow", "l_wrist", 0.04),
    ("neck", "r_shoulder", 0.055),
    ("r_shoulder", "r_elbow", 0.045),
    ("r_elbow", "r_wrist", 0.04),
    ("pelvis", "l_hip", 0.09),
    ("l_hip", "l_knee", 0.07),
    ("l_knee", "l_ankle", 0.05),
    ("pelvis", "r_hip", 0.09),
    ("r_hip", "r_knee", 0.07),
    ("r_knee", "r_ankle", 0.05),
)

GARMENT_PRESETS = {
    "full": JOINT_NAMES,
    "upper": ("spine", "neck", "pelvis", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow"),
    "lower": ("pelvis", "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle"),
    "shorts": ("pelvis", "l_hip", "r_hip", "l_knee", "r_knee"),
    "hair": ("neck", "head"),
}

DEFAULT_PADDING = 0.1


@dataclass
class ProxyBody:
    height_scale: float = 1.0
    girth_scale: float = 1.0
    base_joints: dict = field(default_factory=lambda: dict(DEFAULT_JOINTS))
    base_bones: tuple = DEFAULT_BONES

    def __post_init__(self):
        if self.height_scale <= 0 or self.girth_scale <= 0:
            raise ValueError("shape scales must be positive")
        names = set(self.base_joints)
        children = set()
        for parent, child, radius in self.base_bones:
            if parent not in names or child not in names:
                raise ValueError(f"bone {parent}-{child} references an unknown joint")
            if radius <= 0:
                raise ValueError("capsule radii must be positive")
            if child in children:
                raise ValueError(f"joint {child} has two parents")
            children.add(child)
        if "pelvis" in children or children | {"pelvis"} != names:
            raise ValueError("skeleton must be a tree rooted at the pelvis")

    @property
    def joints(self) -> dict[str, np.ndarray]:
        # scaling every coordinate about the ground origin scales each bone length
        return {k: self.height_scale * np.asarray(v, dtype=np.float64)
                for k, v in self.base_joints.items()}

    @property
    def capsules(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Segment starts ``(B, 3)``, ends ``(B, 3)`` and radii ``(B,)``."""
        j = self.joints
        a = np.array([j[p] for p, _, _ in self.base_bones])
        b = np.array([j[c] for _, c, _ in self.base_bones])
        r = self.girth_scale * np.array([r for _, _, r in self.base_bones])
        return a, b, r

    @property
    def center(self) -> np.ndarray:
        a, b, r = self.capsules
        lo = np.minimum(a, b) - r[:, None]
        hi = np.maximum(a, b) + r[:, None]
        return 0.5 * (lo.min(0) + hi.max(0))

    @property
    def height(self) -> float:
        a, b, r = self.capsules
        return float(np.max(np.maximum(a[:, 1], b[:, 1]) + r) - np.min(np.minimum(a[:, 1], b[:, 1]) - r))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        a, b, r = self.capsules
        lo = (np.minimum(a, b) - r[:, None]).min(0)
        hi = (np.maximum(a, b) + r[:, None]).max(0)
        return lo, hi

    def to_dict(self) -> dict:
        return {"height_scale": self.height_scale, "girth_scale": self.girth_scale}


def segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from points ``(N, 3)`` to every segment ``(B, 3)-(B, 3)``: ``(N, B)``."""
    ab = b - a
    denom = np.maximum(np.einsum("bi,bi->b", ab, ab), 1e-300)
    ap = p[:, None, :] - a[None]
    t = np.clip(np.einsum("nbi,bi->nb", ap, ab) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(p[:, None, :] - closest, axis=-1)


def distance_to_body(body: ProxyBody, points: np.ndarray) -> np.ndarray:
    """Signed distance to the capsule union (negative inside)."""
    a, b, r = body.capsules
    return np.min(segment_distance(np.atleast_2d(points), a, b) - r, axis=1)


def _sample_capsule(rng, a, b, r, n):
    """Uniform samples on one capsule surface; returns points and outward normals."""
    axis = b - a
    length = np.linalg.norm(axis)
    u = axis / length
    helper = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    side = 2 * np.pi * r * length
    caps = 4 * np.pi * r * r
    on_side = rng.random(n) < side / (side + caps)

    t = rng.random(n)
    phi = rng.random(n) * 2 * np.pi
    radial = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    side_pts = a + t[:, None] * axis + r * radial

    sph = rng.normal(size=(n, 3))
    sph /= np.linalg.norm(sph, axis=1, keepdims=True)
    cap_center = np.where((sph @ u >= 0)[:, None], b, a)
    cap_pts = cap_center + r * sph

    pts = np.where(on_side[:, None], side_pts, cap_pts)
    normals = np.where(on_side[:, None], radial, sph)
    return pts, normals


def sample_surface(body: ProxyBody, n: int, layer_offset: float = 0.0, seed: int = 0) -> np.ndarray:
    """``n`` points uniform by area on the union surface, pushed out by ``layer_offset``.

    Sampling happens directly on the dilated capsules (radius + offset) and
    rejects any sample buried inside another dilated capsule, so every output
    point is exactly ``layer_offset`` from the original union.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if layer_offset < 0:
        raise ValueError("layer_offset must be non-negative")
    rng = np.random.default_rng(seed)
    a, b, r = body.capsules
    r = r + layer_offset
    lengths = np.linalg.norm(b - a, axis=1)
    areas = 2 * np.pi * r * lengths + 4 * np.pi * r**2
    probs = areas / areas.sum()
    out = []
    have = 0
    while have < n:
        batch = max(2 * (n - have), 256)
        which = rng.choice(len(r), size=batch, p=probs)
        pts = np.empty((batch, 3))
        for k in range(len(r)):
            sel = np.flatnonzero(which == k)
            if len(sel):
                pts[sel] = _sample_capsule(rng, a[k], b[k], r[k], len(sel))[0]
        d = segment_distance(pts, a, b) - r
        d[np.arange(batch), which] = np.inf
        keep = np.all(d >= -1e-12, axis=1)
        out.append(pts[keep])
        have += int(keep.sum())
    return np.concatenate(out)[:n]


@dataclass(frozen=True)
class JointBox:
    min: np.ndarray
    max: np.ndarray
    source_joints: tuple
    padding: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.min) & (p <= self.max), axis=1)


def joint_box(body: ProxyBody, joints, padding: float = DEFAULT_PADDING) -> JointBox:
    if isinstance(joints, str):
        joints = GARMENT_PRESETS[joints]
    table = body.joints
    missing = [j for j in joints if j not in table]
    if missing:
        raise KeyError(f"unknown joints: {missing}")
    if not joints:
        raise ValueError("joint_box needs at least one joint")
    pos = np.array([table[j] for j in joints])
    return JointBox(pos.min(0) - padding, pos.max(0) + padding, tuple(joints), float(padding))


def filter_points(points: np.ndarray, box: JointBox) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points[box.contains(points)]


def layer_offset(m: int) -> float:
    """Outward expansion of layer ``m`` relative to the bare body."""
    return 0.01 * (m - 1)


def init_layer(
    body: ProxyBody,
    m: int,
    joints=None,
    n: int = 5000,
    padding: float = DEFAULT_PADDING,
    seed: int = 0,
    prompt: str = "",
) -> GaussianLayer:
    """Sparse initial Gaussians for layer ``m`` inside the garment's joint box."""
    offset = layer_offset(m)
    pts = sample_surface(body, n, offset, seed=seed)
    if joints is None:
        joints = "full"
    if isinstance(joints, str):
        joints = GARMENT_PRESETS[joints]
    # joints lie on the capsule axes, so pad past the thickest attached limb
    _, _, radii = body.capsules
    touching = [r for (p, c, _), r in zip(body.base_bones, radii) if p in joints or c in joints]
    box = joint_box(body, joints, padding + max(touching, default=0.0) + offset)
    pts = filter_points(pts, box)
    if len(pts) == 0:
        raise ValueError(f"joint box {box.source_joints} (padding {padding}) removed every point")
    return GaussianLayer.from_activated(
        pts, scales=0.02, colors=np.full((len(pts), 3), 0.5), opacities=np.full(len(pts), 0.7),
        layer_index=m, prompt=prompt,
    )

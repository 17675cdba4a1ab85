"""Image-space losses with hand-written gradients.

Every loss returns its value together with the gradient w.r.t. the image
argument(s) being optimized; masks are constants.  Reductions are means over
the relevant masked pixels so weights do not depend on resolution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.ndimage import correlate1d

log = logging.getLogger(__name__)

# masked opacities closer than this are treated as uniform; matches the
# accuracy the tile renderer guarantees against the brute-force oracle
DENSITY_FLAT_TOL = 1e-5

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class LossValue(NamedTuple):
    value: float
    grad: np.ndarray


class SSIMValue(NamedTuple):
    value: float
    grad_a: np.ndarray
    grad_b: np.ndarray


@dataclass(frozen=True)
class MaskImage:
    values: np.ndarray
    source: str = "layer_opacity"  # layer_opacity | avatar_opacity | external

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=bool))

    def __and__(self, other: "MaskImage") -> "MaskImage":
        return MaskImage(self.values & other.values, "external")

    @property
    def shape(self):
        return self.values.shape


def _mask(m) -> np.ndarray:
    return m.values if isinstance(m, MaskImage) else np.asarray(m, dtype=bool)


def synth_mask(render, threshold: float = 0.5, source: str = "layer_opacity") -> MaskImage:
    """Binary component mask from the rendered opacity map."""
    return MaskImage(render.opacity_map >= threshold, source)


def density_loss(opacity_map: np.ndarray, mask, flat_tol: float = DENSITY_FLAT_TOL) -> LossValue:
    """Push masked opacity toward uniform: mean of ``(1 - f_n(alpha))^2`` over the mask.

    ``f_n`` min-max normalizes the masked values; min and max are held
    constant for the gradient.  A masked map whose spread is at most
    ``flat_tol`` counts as constant and normalizes to 1 (loss 0).
    """
    m = _mask(mask)
    grad = np.zeros_like(opacity_map, dtype=np.float64)
    n = int(m.sum())
    if n == 0:
        log.info("density_loss: empty mask, loss is 0")
        return LossValue(0.0, grad)
    vals = opacity_map[m]
    lo, hi = vals.min(), vals.max()
    span = hi - lo
    if span <= flat_tol:
        return LossValue(0.0, grad)
    resid = 1.0 - (vals - lo) / span
    grad[m] = -2.0 * resid / (span * n)
    return LossValue(float(np.mean(resid**2)), grad)


def _gaussian_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    w = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return w / w.sum()


def _blur_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = len(w) // 2
    out = correlate1d(correlate1d(img, w, axis=0, mode="nearest"), w, axis=1, mode="nearest")
    return out[r:-r, r:-r]


def _blur_valid_adjoint(g: np.ndarray, w: np.ndarray, shape) -> np.ndarray:
    r = len(w) // 2
    full = np.zeros(shape)
    full[r:-r, r:-r] = g
    # symmetric window: the adjoint of correlation is the same correlation
    return correlate1d(correlate1d(full, w, axis=0, mode="constant"), w, axis=1, mode="constant")


def ssim(a: np.ndarray, b: np.ndarray, data_range: float | None = None) -> SSIMValue:
    """Mean SSIM over all fully-covered 11x11 windows, with gradients for both images.

    ``data_range`` defaults to ``max(b) - min(b)`` (``b`` is the reference) and
    is treated as a constant.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("ssim expects two single-channel images of equal shape")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if data_range is None:
        data_range = float(b.max() - b.min())
        if data_range <= 0:
            data_range = 1.0
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    w = _gaussian_window()
    mu_a = _blur_valid(a, w)
    mu_b = _blur_valid(b, w)
    e_aa = _blur_valid(a * a, w)
    e_bb = _blur_valid(b * b, w)
    e_ab = _blur_valid(a * b, w)
    A1 = 2 * mu_a * mu_b + c1
    A2 = 2 * (e_ab - mu_a * mu_b) + c2
    B1 = mu_a**2 + mu_b**2 + c1
    B2 = (e_aa - mu_a**2) + (e_bb - mu_b**2) + c2
    S = A1 * A2 / (B1 * B2)
    n = S.size

    d_e_ab = 2 * S / A2 / n

    def grad_for(x, y, mu_x, mu_y):
        d_mu = S * (2 * mu_y / A1 - 2 * mu_y / A2 - 2 * mu_x / B1 + 2 * mu_x / B2) / n
        d_e_xx = -S / B2 / n
        return (_blur_valid_adjoint(d_mu, w, x.shape)
                + 2 * x * _blur_valid_adjoint(d_e_xx, w, x.shape)
                + y * _blur_valid_adjoint(d_e_ab, w, x.shape))

    return SSIMValue(float(S.mean()), grad_for(a, b, mu_a, mu_b), grad_for(b, a, mu_b, mu_a))


def human_fitting_loss(d_av: np.ndarray, d_m: np.ndarray, M_av, M_m) -> LossValue:
    """Mean squared depth gap between garment and body where both are present."""
    overlap = _mask(M_av) & _mask(M_m)
    grad = np.zeros_like(d_m, dtype=np.float64)
    n = int(overlap.sum())
    if n == 0:
        log.info("human_fitting_loss: empty overlap, loss is 0")
        return LossValue(0.0, grad)
    diff = d_m[overlap] - d_av[overlap]
    grad[overlap] = 2.0 * diff / n
    return LossValue(float(np.mean(diff**2)), grad)


def similarity_loss(d_m: np.ndarray, d_m_before: np.ndarray) -> LossValue:
    """Negative SSIM between the current garment depth and its pre-transfer depth."""
    res = ssim(d_m, d_m_before)
    return LossValue(-res.value, -res.grad_a)


def visibility_loss(d_av: np.ndarray, d_m: np.ndarray, M_m, delta_occ: float = 0.03,
                    occluder_mask=None) -> LossValue:
    """Hinge keeping the garment at least ``delta_occ`` in front of the inner layers.

    Per garment pixel: ``max(0, d_m - d_av + delta_occ)``, averaged over the
    garment mask.  Pixels outside ``occluder_mask`` (no inner layer rendered
    there) have nothing to hide behind and count as satisfied.
    """
    m = _mask(M_m)
    grad = np.zeros_like(d_m, dtype=np.float64)
    n = int(m.sum())
    if n == 0:
        return LossValue(0.0, grad)
    active = m if occluder_mask is None else m & _mask(occluder_mask)
    hinge = np.zeros_like(d_m, dtype=np.float64)
    hinge[active] = np.maximum(0.0, d_m[active] - d_av[active] + delta_occ)
    grad[active & (hinge > 0)] = 1.0 / n
    return LossValue(float(hinge[m].sum() / n), grad)

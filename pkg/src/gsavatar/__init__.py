"""Layered Gaussian-splat avatars: proxy body, tile renderer, guidance and garment transfer."""

from .body import ProxyBody, init_layer, joint_box, sample_surface
from .core import (
    Camera,
    ConfigurationError,
    FrozenFlags,
    GaussianLayer,
    GaussianPoint,
    LayeredAvatar,
    PointSet,
    compose_prefix,
    orbit_camera,
)
from .guidance import ExternalBackend, MockBackend, NoiseSchedule, dual_sds_grad, sds_grad
from .losses import density_loss, human_fitting_loss, similarity_loss, ssim, synth_mask, visibility_loss
from .pipeline import (
    Diverged,
    StageConfig,
    TransferConfig,
    densify_perturb,
    generate_layer,
    transfer_garment,
)
from .render import DEFAULT_CONFIG, EXACT_CONFIG, PixelGrads, RenderConfig, backward, oracle_render, render

__all__ = [name for name in dir() if not name.startswith("_")]

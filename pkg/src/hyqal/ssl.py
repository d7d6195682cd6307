"""Contrastive pretraining pieces: augmentation views, projection head, NT-Xent."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import affine_transform
from scipy.special import logsumexp

from .errors import ConfigError, ShapeError
from .tensorcore import Dense, L2Normalize, ReLU, Sequential, as_tensor

log = logging.getLogger(__name__)


@dataclass
class AugmentationConfig:
    rotation_deg: float = 15.0
    crop_min: float = 0.8
    crop_max: float = 1.0
    translate: float = 0.1
    intensity_scale: tuple = (0.9, 1.1)
    intensity_shift: float = 0.05
    p_rotate: float = 0.8
    p_crop: float = 0.8
    p_translate: float = 0.5
    p_intensity: float = 0.8

    def __post_init__(self):
        self.intensity_scale = tuple(self.intensity_scale)
        checks = [
            (0.0 <= self.rotation_deg <= 180.0, "rotation_deg must be in [0, 180]"),
            (0.0 < self.crop_min <= self.crop_max <= 1.0, "need 0 < crop_min <= crop_max <= 1"),
            (0.0 <= self.translate <= 0.5, "translate must be in [0, 0.5]"),
            (len(self.intensity_scale) == 2 and 0.0 < self.intensity_scale[0] <= self.intensity_scale[1],
             "intensity_scale must be (lo, hi) with 0 < lo <= hi"),
            (0.0 <= self.intensity_shift <= 0.5, "intensity_shift must be in [0, 0.5]"),
        ]
        for name in ("p_rotate", "p_crop", "p_translate", "p_intensity"):
            checks.append((0.0 <= getattr(self, name) <= 1.0, f"{name} must be a probability"))
        for ok, msg in checks:
            if not ok:
                raise ConfigError(f"augmentation: {msg}")

    @classmethod
    def identity(cls):
        return cls(p_rotate=0.0, p_crop=0.0, p_translate=0.0, p_intensity=0.0)


@dataclass
class ContrastiveConfig:
    temperature: float = 0.5
    embed_dim: int = 64
    hidden_dim: int = 128

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


def sample_params(cfg: AugmentationConfig, rng) -> dict:
    """Draw one augmentation parameter set; the result is JSON-serialisable."""
    xi = {
        "rotation_deg": 0.0,
        "crop_ratio": 1.0,
        "crop_offset": [0.0, 0.0],
        "translate": [0.0, 0.0],
        "intensity_scale": 1.0,
        "intensity_shift": 0.0,
    }
    # draw every variate regardless of the coin flips to keep rng streams aligned
    u = rng.random(4)
    rot = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    ratio = rng.uniform(cfg.crop_min, cfg.crop_max)
    offset = rng.uniform(-0.5, 0.5, size=2) * (1.0 - ratio)
    shift = rng.uniform(-cfg.translate, cfg.translate, size=2)
    scale = rng.uniform(*cfg.intensity_scale)
    bias = rng.uniform(-cfg.intensity_shift, cfg.intensity_shift)
    if u[0] < cfg.p_rotate:
        xi["rotation_deg"] = float(rot)
    if u[1] < cfg.p_crop:
        xi["crop_ratio"] = float(ratio)
        xi["crop_offset"] = [float(v) for v in offset]
    if u[2] < cfg.p_translate:
        xi["translate"] = [float(v) for v in shift]
    if u[3] < cfg.p_intensity:
        xi["intensity_scale"] = float(scale)
        xi["intensity_shift"] = float(bias)
    return xi


def _snap(m):
    r = np.round(m)
    return np.where(np.abs(m - r) < 1e-12, r, m)


def apply_params(x: np.ndarray, xi: dict) -> np.ndarray:
    """Apply a sampled parameter set to a 2-D image in [0, 1].

    Geometry is one bilinear resample: an output pixel ``o`` reads the input at
    ``c + R(ratio * (o - c) + crop_offset * size) + translate * size`` where
    ``c`` is the image centre.  Positive angles turn the content
    counter-clockwise, like ``np.rot90``.
    """
    x = as_tensor(x)
    h, w = x.shape
    size = np.array([h, w], dtype=np.float64)
    centre = (size - 1) / 2
    t = np.deg2rad(xi["rotation_deg"])
    rot = _snap(np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]]))
    ratio = xi["crop_ratio"]
    matrix = rot * ratio
    crop = np.asarray(xi["crop_offset"]) * size
    shift = np.asarray(xi["translate"]) * size
    offset = centre - matrix @ centre + rot @ crop + shift
    if np.array_equal(matrix, np.eye(2)) and not np.any(offset):
        y = x.copy()
    else:
        y = affine_transform(x, matrix, offset=offset, order=1, mode="constant", cval=0.0)
    if xi["intensity_scale"] != 1.0 or xi["intensity_shift"] != 0.0:
        y = y * xi["intensity_scale"] + xi["intensity_shift"]
    return np.clip(y, 0.0, 1.0)


def make_views(x, cfg: AugmentationConfig, rng):
    """Two independent augmentations of ``x``; returns ``(view1, view2, xi1, xi2)``."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("make_views", ("H", "W"), x.shape)
    if x.size and x.min() == x.max():
        log.warning("make_views: constant image (value %.4f)", float(x.flat[0]))
    xi1 = sample_params(cfg, rng)
    xi2 = sample_params(cfg, rng)
    return apply_params(x, xi1), apply_params(x, xi2), xi1, xi2


def projection_head(in_dim, cfg: ContrastiveConfig, rng=None) -> Sequential:
    return Sequential([
        Dense(in_dim, cfg.hidden_dim, rng=rng),
        ReLU(),
        Dense(cfg.hidden_dim, cfg.embed_dim, rng=rng),
        L2Normalize(),
    ])


def project(h, head: Sequential) -> np.ndarray:
    return head.forward(h)


def similarity(z_i, z_j, tau: float) -> float:
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    return float(np.dot(z_i, z_j) / tau)


def ntxent_loss(z, tau: float):
    """NT-Xent over 2N embeddings where rows (2k, 2k+1) are positive pairs.

    Returns ``(loss, grad)`` with ``grad`` of the same shape as ``z``.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[0] % 2 or z.shape[0] < 4:
        raise ShapeError("ntxent", ("2N>=4", "D"), z.shape, "need at least two pairs for negatives")
    m = z.shape[0]
    sim = z @ z.T / tau
    np.fill_diagonal(sim, -np.inf)
    partner = np.arange(m) ^ 1
    lse = logsumexp(sim, axis=1)
    loss = float(np.mean(lse - sim[np.arange(m), partner]))

    soft = np.exp(sim - lse[:, None])
    soft[np.arange(m), partner] -= 1.0
    soft /= m
    grad = (soft + soft.T) @ z / tau
    return loss, grad

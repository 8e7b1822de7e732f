# app/services/augment.py
"""
Random 3D view generation: affine, sharpening/blur, gamma contrast, noise.

Volumes are D x H x W or C x D x H x W (channels share one geometric
transform). Intensities are expected in [0, 255] and every output is
clipped back into that range.
"""
import logging
from typing import Callable, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from app.errors import ConfigError, ShapeError
from app.schemas import AugmentPolicy
from app.services import seeding
from app.services.tensor_core import Array

logger = logging.getLogger(__name__)

INTENSITY_MAX = 255.0


def _clip(v: Array, dtype) -> Array:
    return np.clip(v, 0.0, INTENSITY_MAX).astype(dtype, copy=False)


def _spatial(vol: Array) -> Tuple[Array, bool]:
    if vol.ndim == 3:
        return vol[None], True
    if vol.ndim == 4:
        return vol, False
    raise ShapeError(f"expected a D x H x W or C x D x H x W volume, got shape {vol.shape}")


def _check_sigma(sigma: float) -> None:
    if sigma < 0:
        raise ConfigError(f"sigma must be non-negative, got {sigma}")


# -------------------------------
# I) affine
# -------------------------------
def rotation_matrix(angles_deg: Sequence[float]) -> Array:
    """R = R0 @ R1 @ R2, where Ra rotates the plane of the two other axes."""
    out = np.eye(3)
    for axis, deg in enumerate(angles_deg):
        a = np.deg2rad(deg)
        c, s = np.cos(a), np.sin(a)
        i, j = [ax for ax in range(3) if ax != axis]
        r = np.eye(3)
        r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
        out = out @ r
    return out


def affine3d(vol: Array, angles: Sequence[float] = (0.0, 0.0, 0.0), scale: float = 1.0,
             shift: Sequence[float] = (0.0, 0.0, 0.0)) -> Array:
    """Rotate, scale and translate about the volume center, trilinear, zero fill.

    `shift` is a fraction of the extent along each axis."""
    if scale <= 0:
        raise ConfigError(f"degenerate scale {scale}")
    chans, squeeze = _spatial(vol)
    if not np.any(angles) and scale == 1.0 and not np.any(shift):
        return vol.copy()

    extents = np.asarray(chans.shape[1:], dtype=np.float64)
    center = (extents - 1.0) / 2.0
    forward = rotation_matrix(angles) * scale
    inverse = np.linalg.inv(forward)
    translation = np.asarray(shift, dtype=np.float64) * extents
    # out(y) = in(inverse @ (y - center - translation) + center)
    offset = center - inverse @ (center + translation)
    out = np.stack([
        ndimage.affine_transform(ch.astype(np.float64), inverse, offset=offset,
                                 order=1, mode="constant", cval=0.0)
        for ch in chans
    ])
    out = _clip(out, vol.dtype)
    return out[0] if squeeze else out


# -------------------------------
# II) appearance
# -------------------------------
def _blur_raw(vol: Array, sigma: float) -> Array:
    out, squeeze = _spatial(np.asarray(vol, dtype=np.float64))
    # channel axis is not smoothed
    out = ndimage.gaussian_filter(out, sigma=(0.0, sigma, sigma, sigma), mode="nearest")
    return out[0] if squeeze else out


def gaussian_blur(vol: Array, sigma: float) -> Array:
    _check_sigma(sigma)
    if sigma == 0:
        return vol.copy()
    return _clip(_blur_raw(vol, sigma), vol.dtype)


def sharpen(vol: Array, amount: float, sigma: float = 1.0) -> Array:
    """Unsharp mask: v + amount * (v - blur(v))."""
    _check_sigma(sigma)
    if amount == 0 or sigma == 0:
        return vol.copy()
    v = np.asarray(vol, dtype=np.float64)
    return _clip(v + amount * (v - _blur_raw(v, sigma)), vol.dtype)


# -------------------------------
# III) contrast
# -------------------------------
def gamma_adjust(vol: Array, gamma: float) -> Array:
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    if gamma == 1.0:
        return vol.copy()
    v = np.clip(np.asarray(vol, dtype=np.float64), 0.0, INTENSITY_MAX)
    return _clip(INTENSITY_MAX * (v / INTENSITY_MAX) ** gamma, vol.dtype)


# -------------------------------
# IV) noise
# -------------------------------
def add_noise(vol: Array, sigma: float, rng: np.random.Generator) -> Array:
    _check_sigma(sigma)
    noise = rng.normal(0.0, sigma, size=vol.shape) if sigma > 0 else 0.0
    return _clip(np.asarray(vol, dtype=np.float64) + noise, vol.dtype)


# -------------------------------
# views
# -------------------------------
Transform = Callable[[Array, AugmentPolicy, np.random.Generator], Array]


def _random_affine(vol, policy, rng):
    angles = rng.uniform(*policy.rotation_deg, size=3)
    return affine3d(vol, angles, float(rng.uniform(*policy.scale)), rng.uniform(*policy.shift, size=3))


def _random_gamma(vol, policy, rng):
    return gamma_adjust(vol, float(rng.uniform(*policy.gamma)))


def _random_sharpen(vol, policy, rng):
    return sharpen(vol, float(rng.uniform(*policy.sharpen_amount)), policy.sharpen_sigma)


def _random_blur(vol, policy, rng):
    return gaussian_blur(vol, float(rng.uniform(*policy.blur_sigma)))


def _random_noise(vol, policy, rng):
    return add_noise(vol, policy.noise_sigma, rng)


# applied in this order
PIPELINE: List[Tuple[str, Transform]] = [
    ("p_affine", _random_affine),
    ("p_gamma", _random_gamma),
    ("p_sharpen", _random_sharpen),
    ("p_blur", _random_blur),
    ("p_noise", _random_noise),
]


def augment_once(vol: Array, policy: AugmentPolicy, rng: np.random.Generator) -> Array:
    fire = [rng.random() < getattr(policy, p) for p, _ in PIPELINE]
    enabled = [i for i, (p, _) in enumerate(PIPELINE) if getattr(policy, p) > 0]
    if policy.ensure_one and enabled and not any(fire):
        fire[enabled[int(rng.integers(len(enabled)))]] = True
    out = vol
    for on, (_, fn) in zip(fire, PIPELINE):
        if on:
            out = fn(out, policy, rng)
    return out.copy() if out is vol else out


def make_views(vol: Array, policy: AugmentPolicy, rng: np.random.Generator) -> Tuple[Array, Array]:
    return augment_once(vol, policy, rng), augment_once(vol, policy, rng)


def make_view_batch(volumes: Array, policy: AugmentPolicy, seed: int, iteration: int,
                    indices: Sequence[int] = None) -> Tuple[Array, Array]:
    """Views for an N x C x D x H x W batch; sample i draws from its own stream."""
    keys = range(len(volumes)) if indices is None else indices
    pairs = [make_views(v, policy, seeding.rng(seed, "augment", iteration, int(key)))
             for v, key in zip(volumes, keys)]
    return np.stack([a for a, _ in pairs]), np.stack([b for _, b in pairs])

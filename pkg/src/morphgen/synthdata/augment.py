"""Training-time image augmentation.

Fixed application order: rescale, aspect distortion, rotation (the three
geometric ops are composed into one bilinear warp with reflect padding),
then brightness, hue, contrast, saturation, Gaussian noise. Every
magnitude is drawn uniformly from [0, max]; brightness is applied as a
multiplicative factor 1 + m (brighten-only), the other photometric ops
get a random sign. Masks and labels are never touched: augmentation is
an image-only operation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..seeding import rng_from

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentConfig:
    rescale_max: float = 0.20
    aspect_max: float = 0.10
    rotation_max: float = 2.0 * np.pi
    brightness_max: float = 0.50
    hue_max: float = 0.10
    contrast_max: float = 0.70
    saturation_max: float = 0.30
    gauss_noise_sigma: float = 0.02

    def __post_init__(self) -> None:
        for name in ("rescale_max", "aspect_max", "brightness_max", "hue_max",
                     "contrast_max", "saturation_max"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {val}")
        if not 0.0 <= self.rotation_max <= 2.0 * np.pi:
            raise ValueError(f"rotation_max must be in [0, 2*pi], got {self.rotation_max}")
        if self.gauss_noise_sigma < 0.0:
            raise ValueError(f"gauss_noise_sigma must be >= 0, got {self.gauss_noise_sigma}")

    def to_dict(self) -> dict:
        return {
            "rescale_max": self.rescale_max,
            "aspect_max": self.aspect_max,
            "rotation_max": self.rotation_max,
            "brightness_max": self.brightness_max,
            "hue_max": self.hue_max,
            "contrast_max": self.contrast_max,
            "saturation_max": self.saturation_max,
            "gauss_noise_sigma": self.gauss_noise_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        return cls(**{k: float(v) for k, v in d.items()})


def sample_augment_params(cfg: AugmentConfig, seed: int) -> dict:
    """The exact draws augment() will use for this (cfg, seed)."""
    rng = rng_from(seed, 7)
    draws = {
        "rescale": rng.uniform(0.0, cfg.rescale_max),
        "rescale_sign": int(rng.integers(0, 2)) * 2 - 1,
        "aspect": rng.uniform(0.0, cfg.aspect_max),
        "aspect_sign": int(rng.integers(0, 2)) * 2 - 1,
        "rotation": rng.uniform(0.0, cfg.rotation_max),
        "brightness": rng.uniform(0.0, cfg.brightness_max),
        "hue": rng.uniform(0.0, cfg.hue_max),
        "hue_sign": int(rng.integers(0, 2)) * 2 - 1,
        "contrast": rng.uniform(0.0, cfg.contrast_max),
        "contrast_sign": int(rng.integers(0, 2)) * 2 - 1,
        "saturation": rng.uniform(0.0, cfg.saturation_max),
        "saturation_sign": int(rng.integers(0, 2)) * 2 - 1,
    }
    return draws


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    j = np.mod(idx, period)
    return np.where(j >= n, period - j, j)


def _affine_sample(img: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Bilinear resample with reflect padding; inv maps output->input coords."""
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    x = cols - cx
    y = rows - cy
    sx = inv[0, 0] * x + inv[0, 1] * y + cx
    sy = inv[1, 0] * x + inv[1, 1] * y + cy

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    wx = sx - x0
    wy = sy - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)
    xa = _reflect_index(x0i, w)
    xb = _reflect_index(x0i + 1, w)
    ya = _reflect_index(y0i, h)
    yb = _reflect_index(y0i + 1, h)

    waa = ((1 - wy) * (1 - wx))[:, :, None]
    wab = ((1 - wy) * wx)[:, :, None]
    wba = (wy * (1 - wx))[:, :, None]
    wbb = (wy * wx)[:, :, None]
    return (img[ya, xa] * waa + img[ya, xb] * wab
            + img[yb, xa] * wba + img[yb, xb] * wbb)


def _hue_rotation_matrix(theta: float) -> np.ndarray:
    """Rotation of RGB space about the gray axis by theta radians."""
    axis = np.ones(3) / np.sqrt(3.0)
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return (np.cos(theta) * np.eye(3) + np.sin(theta) * k
            + (1.0 - np.cos(theta)) * np.outer(axis, axis))


def augment(image: np.ndarray, cfg: AugmentConfig, seed: int) -> np.ndarray:
    """Augmented copy of one (H, W, 3) image in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    p = sample_augment_params(cfg, seed)
    rng = rng_from(seed, 8)  # separate stream for the noise field

    out = image
    scale = 1.0 + p["rescale_sign"] * p["rescale"]
    aspect = 1.0 + p["aspect_sign"] * p["aspect"]
    theta = p["rotation"]
    if scale != 1.0 or aspect != 1.0 or theta != 0.0:
        sq = np.sqrt(aspect)
        fwd = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        fwd = fwd @ np.diag([scale * sq, scale / sq])
        out = _affine_sample(out, np.linalg.inv(fwd))

    bright = 1.0 + p["brightness"]
    if bright != 1.0:
        out = out * bright

    hue_theta = 2.0 * np.pi * p["hue"] * p["hue_sign"]
    if hue_theta != 0.0:
        out = out @ _hue_rotation_matrix(hue_theta).T

    contrast = 1.0 + p["contrast_sign"] * p["contrast"]
    if contrast != 1.0:
        mean = out.mean()
        out = mean + contrast * (out - mean)

    saturation = 1.0 + p["saturation_sign"] * p["saturation"]
    if saturation != 1.0:
        luma = out @ _LUMA
        out = luma[:, :, None] + saturation * (out - luma[:, :, None])

    if cfg.gauss_noise_sigma > 0.0:
        out = out + cfg.gauss_noise_sigma * rng.standard_normal(out.shape)

    if out is image:
        return image.copy()
    return np.clip(out, 0.0, 1.0)

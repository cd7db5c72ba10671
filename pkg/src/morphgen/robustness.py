"""Perturbation protocols: graded image corruptions and L-inf PGD.

Eight corruption kinds at severities 0..3 (severity 0 is the identity for
every kind); the per-severity magnitude tables below ship with the repo
so results are comparable across machines. The compression corruption is
an 8x8 block-DCT quantisation rather than a codec call, which keeps the
output bit-reproducible everywhere.

The attack is standard L-inf projected gradient ascent on the BCE loss,
clipped to the valid pixel range at every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import convolve

from .seeding import rng_from

CORRUPTION_KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "motion_blur",
    "jpeg_like_compression",
    "brightness_shift",
    "contrast_reduction",
)

# Severity tables, index 0..3. Index 0 always encodes "no-op".
GAUSSIAN_NOISE_SIGMA = (0.0, 0.04, 0.08, 0.16)
SHOT_NOISE_PHOTONS = (0.0, 200.0, 60.0, 20.0)       # 0.0 means identity
IMPULSE_FRACTION = (0.0, 0.01, 0.03, 0.08)
DEFOCUS_RADIUS = (0, 1, 2, 3)                        # disk radius in pixels
MOTION_LENGTH = (0, 3, 6, 9)                         # kernel length in pixels
MOTION_ANGLE = np.deg2rad(30.0)
JPEG_QUALITY = (0.0, 60.0, 35.0, 15.0)               # 0.0 means identity
BRIGHTNESS_DELTA = (0.0, 0.10, 0.20, 0.35)
CONTRAST_FACTOR = (1.0, 0.70, 0.45, 0.25)

SEVERITY_TABLES = {
    "gaussian_noise": GAUSSIAN_NOISE_SIGMA,
    "shot_noise": SHOT_NOISE_PHOTONS,
    "impulse_noise": IMPULSE_FRACTION,
    "defocus_blur": DEFOCUS_RADIUS,
    "motion_blur": MOTION_LENGTH,
    "jpeg_like_compression": JPEG_QUALITY,
    "brightness_shift": BRIGHTNESS_DELTA,
    "contrast_reduction": CONTRAST_FACTOR,
}

# Standard luminance quantisation table used by the block-DCT compressor.
_JPEG_Q50 = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind '{self.kind}'")
        if not 0 <= self.severity <= 3:
            raise ValueError(f"severity must be in 0..3, got {self.severity}")


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float
    steps: int = 20
    alpha: float | None = None   # defaults to 2.5 * epsilon / steps
    random_start: bool = True

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")

    @property
    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 2.5 * self.epsilon / self.steps


def _disk_kernel(radius: int) -> np.ndarray:
    ax = np.arange(-radius, radius + 1)
    xx, yy = np.meshgrid(ax, ax)
    k = (xx * xx + yy * yy <= radius * radius).astype(np.float64)
    return k / k.sum()


def _motion_kernel(length: int, angle: float) -> np.ndarray:
    half = (length - 1) / 2.0
    size = length if length % 2 == 1 else length + 1
    k = np.zeros((size, size), dtype=np.float64)
    c = (size - 1) / 2.0
    ts = np.linspace(-half, half, 4 * length)
    for t in ts:
        r = int(round(c + t * np.sin(angle)))
        col = int(round(c + t * np.cos(angle)))
        k[r, col] += 1.0
    return k / k.sum()


def _blur(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        out[:, :, ch] = convolve(image[:, :, ch], kernel, mode="reflect")
    return out


def _block_dct_compress(image: np.ndarray, quality: float) -> np.ndarray:
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    qtab = np.floor((_JPEG_Q50 * scale + 50.0) / 100.0)
    qtab = np.clip(qtab, 1.0, None)
    h, w, _ = image.shape
    ph = (-h) % 8
    pw = (-w) % 8
    padded = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    x = padded * 255.0 - 128.0
    out = np.empty_like(x)
    for ch in range(3):
        plane = x[:, :, ch]
        blocks = plane.reshape(plane.shape[0] // 8, 8, plane.shape[1] // 8, 8)
        blocks = blocks.transpose(0, 2, 1, 3)
        coeffs = dctn(blocks, type=2, axes=(2, 3), norm="ortho")
        coeffs = np.round(coeffs / qtab) * qtab
        rec = idctn(coeffs, type=2, axes=(2, 3), norm="ortho")
        out[:, :, ch] = rec.transpose(0, 2, 1, 3).reshape(plane.shape)
    out = (out + 128.0) / 255.0
    return out[:h, :w, :]


def corrupt(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply one corruption; clamped to [0, 1], deterministic in spec.seed."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    if spec.severity == 0:
        return image.copy()

    kind, s = spec.kind, spec.severity
    if kind == "gaussian_noise":
        rng = rng_from(spec.seed, 1)
        out = image + GAUSSIAN_NOISE_SIGMA[s] * rng.standard_normal(image.shape)
    elif kind == "shot_noise":
        rng = rng_from(spec.seed, 2)
        lam = SHOT_NOISE_PHOTONS[s]
        out = rng.poisson(image * lam).astype(np.float64) / lam
    elif kind == "impulse_noise":
        rng = rng_from(spec.seed, 3)
        frac = IMPULSE_FRACTION[s]
        hit = rng.random(image.shape[:2]) < frac
        salt = rng.random(image.shape[:2]) < 0.5
        out = image.copy()
        out[hit & salt] = 1.0
        out[hit & ~salt] = 0.0
    elif kind == "defocus_blur":
        out = _blur(image, _disk_kernel(DEFOCUS_RADIUS[s]))
    elif kind == "motion_blur":
        out = _blur(image, _motion_kernel(MOTION_LENGTH[s], MOTION_ANGLE))
    elif kind == "jpeg_like_compression":
        out = _block_dct_compress(image, JPEG_QUALITY[s])
    elif kind == "brightness_shift":
        out = image + BRIGHTNESS_DELTA[s]
    elif kind == "contrast_reduction":
        mean = image.mean()
        out = mean + CONTRAST_FACTOR[s] * (image - mean)
    else:  # pragma: no cover - CorruptionSpec validates kinds
        raise ValueError(f"unknown corruption kind '{kind}'")
    return np.clip(out, 0.0, 1.0)


def pgd_attack(grad_fn, x: np.ndarray, y: np.ndarray, spec: AttackSpec,
               seed: int = 0) -> np.ndarray:
    """L-inf PGD ascent on the loss whose input-gradient grad_fn returns.

    grad_fn(x, y) -> dLoss/dx with x of shape (N, H, W, 3). The returned
    adversarial batch always satisfies ||x_adv - x||_inf <= epsilon and
    x_adv in [0, 1].
    """
    x0 = np.asarray(x, dtype=np.float64)
    eps = spec.epsilon
    if eps == 0.0:
        return x0.copy()
    lo = np.maximum(x0 - eps, 0.0)
    hi = np.minimum(x0 + eps, 1.0)
    if spec.random_start:
        rng = rng_from(seed, 17)
        xa = x0 + eps * rng.uniform(-1.0, 1.0, size=x0.shape)
        xa = np.clip(xa, lo, hi)
    else:
        xa = x0.copy()
    alpha = spec.step_size
    for _ in range(spec.steps):
        g = grad_fn(xa, y)
        xa = xa + alpha * np.sign(g)
        xa = np.clip(xa, lo, hi)
    return xa


def eval_under_corruption(predict_fn, images: np.ndarray, labels: np.ndarray,
                          kinds=CORRUPTION_KINDS, severities=(0, 1, 2, 3),
                          seeds=(0,)) -> list:
    """Accuracy rows for every (kind, severity, seed) combination.

    predict_fn(batch) -> predicted labels. Severity 0 reproduces clean
    accuracy exactly because corrupt() is the identity there.
    """
    rows = []
    for kind in kinds:
        for severity in severities:
            for seed in seeds:
                corrupted = np.stack([
                    corrupt(images[i], CorruptionSpec(kind, severity,
                                                      seed=int(seed) * 1_000_003 + i))
                    for i in range(images.shape[0])
                ])
                pred = predict_fn(corrupted)
                acc = float(np.mean(pred == labels))
                rows.append({"kind": kind, "severity": severity,
                             "seed": int(seed), "accuracy": acc})
    return rows


def eval_under_attack(grad_fn, predict_fn, images: np.ndarray,
                      labels: np.ndarray, epsilons, steps: int = 20,
                      random_start: bool = True, seed: int = 0) -> list:
    """Robust accuracy per epsilon with shared (nested) random starts."""
    rows = []
    for eps in epsilons:
        spec = AttackSpec(epsilon=float(eps), steps=steps,
                          random_start=random_start)
        x_adv = pgd_attack(grad_fn, images, labels, spec, seed=seed)
        pred = predict_fn(x_adv)
        acc = float(np.mean(pred == labels))
        rows.append({"epsilon": float(eps), "seed": int(seed), "accuracy": acc})
    return rows

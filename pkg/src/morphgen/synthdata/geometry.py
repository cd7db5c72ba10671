"""Procedural nucleus geometry with class-conditional morphology.

Normal patches carry near-uniform, well-spaced, smooth-contoured nuclei.
Tumor patches mix small and enlarged nuclei with irregular (wobbled)
contours and at least one tight cluster. Contour irregularity is a
low-order sinusoidal radial perturbation, so every shape is cheap to
rasterise and fully determined by the spec.

Area statistics are defined on pi*a*b (the unwobbled ellipse area);
the coefficient of variation uses the population standard deviation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..seeding import rng_from

# Class-conditional construction targets. Normal nuclei vary in area by a
# few percent and sit at least MIN_NORMAL_SEPARATION apart; tumor nuclei
# are drawn from a bimodal size mixture so the area CV always clears the
# tumor threshold, and three of them are planted as a tight cluster.
MIN_NORMAL_SEPARATION = 0.085
NORMAL_WOBBLE_MAX = 0.05
TUMOR_WOBBLE_HIGH = (0.16, 0.32)
TUMOR_WOBBLE_LOW = (0.06, 0.14)
TUMOR_CLUSTER_RADIUS = 0.02
NORMAL_AREA_CV_LIMIT = 0.15
TUMOR_AREA_CV_FLOOR = 0.40


@dataclass(frozen=True)
class Ellipse:
    center: tuple          # (cx, cy) fractional in [0, 1]^2
    axes: tuple            # (a, b) fractional semi-axis lengths
    angle: float           # radians
    wobble: float          # radial perturbation amplitude in [0, 0.5]
    harmonics: tuple       # ((order, weight, phase), ...); weights sum to 1

    def area(self) -> float:
        return float(np.pi * self.axes[0] * self.axes[1])


@dataclass(frozen=True)
class GeometrySpec:
    nuclei: tuple          # tuple of Ellipse
    class_label: int       # 0 normal, 1 tumor
    geometry_seed: int

    def areas(self) -> np.ndarray:
        return np.array([e.area() for e in self.nuclei], dtype=np.float64)

    def area_cv(self) -> float:
        areas = self.areas()
        if areas.size == 0:
            return 0.0
        return float(areas.std() / areas.mean())


def geometry_to_json(geom: GeometrySpec) -> str:
    """Canonical serialization; identical specs give identical bytes."""
    payload = {
        "class_label": geom.class_label,
        "geometry_seed": geom.geometry_seed,
        "nuclei": [
            {
                "center": [repr(geom_e.center[0]), repr(geom_e.center[1])],
                "axes": [repr(geom_e.axes[0]), repr(geom_e.axes[1])],
                "angle": repr(geom_e.angle),
                "wobble": repr(geom_e.wobble),
                "harmonics": [[k, repr(w), repr(p)] for k, w, p in geom_e.harmonics],
            }
            for geom_e in geom.nuclei
        ],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def geometry_from_json(text: str) -> GeometrySpec:
    d = json.loads(text)
    nuclei = tuple(
        Ellipse(
            center=(float(e["center"][0]), float(e["center"][1])),
            axes=(float(e["axes"][0]), float(e["axes"][1])),
            angle=float(e["angle"]),
            wobble=float(e["wobble"]),
            harmonics=tuple((int(k), float(w), float(p)) for k, w, p in e["harmonics"]),
        )
        for e in d["nuclei"]
    )
    return GeometrySpec(nuclei=nuclei, class_label=int(d["class_label"]),
                        geometry_seed=int(d["geometry_seed"]))


def _draw_harmonics(rng: np.random.Generator) -> tuple:
    n_harm = int(rng.integers(3, 8))
    orders = rng.choice(np.arange(2, 9), size=n_harm, replace=False)
    weights = rng.uniform(0.3, 1.0, size=n_harm)
    weights = weights / weights.sum()
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_harm)
    return tuple((int(k), float(w), float(p)) for k, w, p in zip(orders, weights, phases))


def _place_separated(rng: np.random.Generator, n: int, lo: float, hi: float,
                     min_dist: float) -> np.ndarray:
    """Rejection-sample n points in [lo, hi]^2 with pairwise min distance."""
    pts = np.empty((n, 2), dtype=np.float64)
    placed = 0
    for _ in range(200_000):
        if placed == n:
            break
        cand = rng.uniform(lo, hi, size=2)
        if placed == 0 or np.all(
            np.sqrt(np.sum((pts[:placed] - cand) ** 2, axis=1)) >= min_dist
        ):
            pts[placed] = cand
            placed += 1
    if placed < n:
        raise RuntimeError(
            f"could not place {n} centers at separation {min_dist}"
        )
    return pts


def _normal_geometry(rng: np.random.Generator, n: int) -> list:
    r0 = rng.uniform(0.055, 0.072)
    centers = _place_separated(rng, n, 0.12, 0.88, MIN_NORMAL_SEPARATION)
    nuclei = []
    for i in range(n):
        s = rng.uniform(0.94, 1.06)          # area scale; CV stays well under 0.15
        q = rng.uniform(0.85, 1.18)          # aspect; leaves area = pi r0^2 s
        a = r0 * np.sqrt(s * q)
        b = r0 * np.sqrt(s / q)
        nuclei.append(Ellipse(
            center=(float(centers[i, 0]), float(centers[i, 1])),
            axes=(float(a), float(b)),
            angle=float(rng.uniform(0.0, np.pi)),
            wobble=float(rng.uniform(0.0, NORMAL_WOBBLE_MAX)),
            harmonics=_draw_harmonics(rng),
        ))
    return nuclei


def _tumor_area_scales(rng: np.random.Generator, n: int) -> np.ndarray:
    n_small = (n + 1) // 2
    small = rng.uniform(0.30, 0.65, size=n_small)
    large = rng.uniform(1.90, 3.60, size=n - n_small)
    scales = rng.permutation(np.concatenate([small, large]))
    # Bimodal construction already forces CV >= 0.40; widen deterministically
    # in the (unreachable in practice) case it does not.
    for _ in range(64):
        cv = scales.std() / scales.mean()
        if cv >= TUMOR_AREA_CV_FLOOR + 0.02:
            break
        scales[np.argmax(scales)] *= 1.15
        scales[np.argmin(scales)] *= 0.87
    return scales


def _tumor_geometry(rng: np.random.Generator, n: int) -> list:
    r0 = rng.uniform(0.052, 0.066)
    cluster_center = rng.uniform(0.22, 0.78, size=2)
    centers = np.empty((n, 2), dtype=np.float64)
    for i in range(3):  # the guaranteed tight cluster
        ang = rng.uniform(0.0, 2.0 * np.pi)
        rad = rng.uniform(0.0, TUMOR_CLUSTER_RADIUS)
        centers[i] = cluster_center + rad * np.array([np.cos(ang), np.sin(ang)])
    centers[3:] = rng.uniform(0.08, 0.92, size=(n - 3, 2))

    scales = _tumor_area_scales(rng, n)
    n_high_wobble = (n + 1) // 2
    wobbles = np.concatenate([
        rng.uniform(*TUMOR_WOBBLE_HIGH, size=n_high_wobble),
        rng.uniform(*TUMOR_WOBBLE_LOW, size=n - n_high_wobble),
    ])
    wobbles = rng.permutation(wobbles)
    # Keep the half-of-nuclei guarantee after permutation.
    deficit = n_high_wobble - int(np.sum(wobbles >= 0.15))
    if deficit > 0:
        low_idx = np.argsort(wobbles)[:deficit]
        wobbles[low_idx] = rng.uniform(*TUMOR_WOBBLE_HIGH, size=deficit)

    nuclei = []
    for i in range(n):
        q = rng.uniform(0.6, 1.7)
        a = r0 * np.sqrt(scales[i] * q)
        b = r0 * np.sqrt(scales[i] / q)
        nuclei.append(Ellipse(
            center=(float(centers[i, 0]), float(centers[i, 1])),
            axes=(float(a), float(b)),
            angle=float(rng.uniform(0.0, np.pi)),
            wobble=float(wobbles[i]),
            harmonics=_draw_harmonics(rng),
        ))
    return nuclei


def generate_geometry(seed: int, class_label: int, count_range: tuple) -> GeometrySpec:
    """Deterministic class-conditional geometry for one patch."""
    lo, hi = count_range
    if lo > hi:
        raise ValueError(f"count_range min {lo} > max {hi}")
    if lo < 3:
        raise ValueError(f"count_range min must be >= 3, got {lo}")
    if hi > 40:
        raise ValueError(f"count_range max must be <= 40, got {hi}")
    if class_label not in (0, 1):
        raise ValueError(f"class_label must be 0 or 1, got {class_label}")

    rng = rng_from(seed, class_label, lo, hi)
    n = int(rng.integers(lo, hi + 1))
    nuclei = _normal_geometry(rng, n) if class_label == 0 else _tumor_geometry(rng, n)
    return GeometrySpec(nuclei=tuple(nuclei), class_label=class_label,
                        geometry_seed=int(seed))

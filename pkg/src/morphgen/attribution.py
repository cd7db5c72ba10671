"""Integrated-gradients attribution over trained classifiers.

The path integral from a baseline image to the input is approximated with
a midpoint Riemann sum over the pre-sigmoid logit of the chosen class, so
the completeness identity sum(attr) = f(x) - f(baseline) is a
machine-checkable property of every map. Heat maps are written as binary
portable-pixmaps (P6) with a symmetric blue-white-red palette.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class AttributionMap:
    values: np.ndarray        # (H, W, 3) per-pixel attribution
    target_class: int
    baseline_kind: str
    steps: int
    completeness_residual: float
    f_input: float
    f_baseline: float


def integrated_gradients(logit_fn, logit_grad_fn, x: np.ndarray,
                         baseline: np.ndarray, target: int,
                         m: int = 256, baseline_kind: str = "zeros") -> AttributionMap:
    """Midpoint-rule path attribution toward the target-class logit.

    logit_fn(batch) -> (N,) class-1 logits; logit_grad_fn(batch) -> input
    gradients of those logits. For target 0 the logit is negated, so
    completeness holds for both classes.
    """
    if m < 8:
        raise ValueError(f"need m >= 8 integration steps, got {m}")
    if target not in (0, 1):
        raise ValueError(f"target class must be 0 or 1, got {target}")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if x.shape != baseline.shape:
        raise ValueError(f"input {x.shape} and baseline {baseline.shape} differ")
    for name, arr in (("input", x), ("baseline", baseline)):
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"{name} values must lie in [0, 1]")

    sign = 1.0 if target == 1 else -1.0
    diff = x - baseline
    ks = (np.arange(1, m + 1) - 0.5) / m
    points = baseline[None] + ks[:, None, None, None] * diff[None]
    grads = logit_grad_fn(points)
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradients during path integration")
    avg_grad = sign * grads.mean(axis=0)
    values = diff * avg_grad

    f_x = sign * float(logit_fn(x[None])[0])
    f_b = sign * float(logit_fn(baseline[None])[0])
    gap = f_x - f_b
    residual = abs(float(values.sum()) - gap) / max(1.0, abs(gap))
    return AttributionMap(values=values, target_class=target,
                          baseline_kind=baseline_kind, steps=m,
                          completeness_residual=residual,
                          f_input=f_x, f_baseline=f_b)


def make_baseline(kind: str, x: np.ndarray, dataset_mean: np.ndarray | None = None):
    if kind == "zeros":
        return np.zeros_like(x)
    if kind == "dataset_mean":
        if dataset_mean is None:
            raise ValueError("dataset_mean baseline requested but none provided")
        return np.broadcast_to(dataset_mean, x.shape).astype(np.float64)
    raise ValueError(f"unknown baseline kind '{kind}'")


def heatmap_rgb(values: np.ndarray) -> np.ndarray:
    """Signed attribution -> uint8 RGB, blue negative / red positive."""
    signed = values.sum(axis=2)
    peak = np.abs(signed).max()
    t = signed / peak if peak > 0 else np.zeros_like(signed)
    rgb = np.ones(signed.shape + (3,), dtype=np.float64)
    pos = np.clip(t, 0.0, 1.0)
    neg = np.clip(-t, 0.0, 1.0)
    rgb[:, :, 1] -= pos + neg        # white -> red or blue
    rgb[:, :, 2] -= pos
    rgb[:, :, 0] -= neg
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary portable-pixmap (P6) writer."""
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path} is not a P6 portable-pixmap")
    w, h = (int(v) for v in parts[1].split())
    data = parts[3][: w * h * 3]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def attribution_report(logit_fn, logit_grad_fn, images: np.ndarray,
                       out_dir, m: int = 256, baseline_kind: str = "zeros",
                       dataset_mean: np.ndarray | None = None) -> list:
    """Per-sample heat maps for both classes plus a residual CSV.

    Writes 2 * len(images) .ppm files and residuals.csv; returns the
    residual rows.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(images.shape[0]):
        x = images[i]
        baseline = make_baseline(baseline_kind, x, dataset_mean)
        for target in (0, 1):
            amap = integrated_gradients(logit_fn, logit_grad_fn, x, baseline,
                                        target, m=m, baseline_kind=baseline_kind)
            write_ppm(out / f"sample{i:04d}_class{target}.ppm",
                      heatmap_rgb(amap.values))
            rows.append({
                "sample": i,
                "target_class": target,
                "residual": amap.completeness_residual,
                "f_input": amap.f_input,
                "f_baseline": amap.f_baseline,
                "attr_sum": float(amap.values.sum()),
            })
    with open(out / "residuals.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["sample", "target_class", "residual",
                                                "f_input", "f_baseline", "attr_sum"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return rows

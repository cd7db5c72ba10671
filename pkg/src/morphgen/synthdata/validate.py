"""Dataset sanity baseline.

A tiny logistic regression on hand-made pixel statistics (image mean and
std plus a histogram of connected nuclear blob areas) must separate the
two classes in-domain. This guards against shipping an unlearnable task.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..seeding import rng_from

_HIST_BINS = np.array([0.0, 20.0, 45.0, 80.0, 125.0, 180.0, 260.0, 400.0, np.inf])


def sample_features(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """[mean, std, blob-area histogram] for one sample."""
    labeled, n_blobs = ndimage.label(mask[:, :, 0])
    if n_blobs > 0:
        areas = ndimage.sum_labels(np.ones_like(labeled), labeled,
                                   index=np.arange(1, n_blobs + 1))
    else:
        areas = np.zeros(0)
    hist, _ = np.histogram(areas, bins=_HIST_BINS)
    return np.concatenate([[image.mean(), image.std()], hist.astype(np.float64)])


def _fit_logistic(x: np.ndarray, y: np.ndarray, steps: int = 600,
                  lr: float = 0.5, l2: float = 1e-3) -> np.ndarray:
    """Full-batch gradient descent; returns weights with bias appended."""
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    w = np.zeros(xb.shape[1])
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-np.clip(xb @ w, -30, 30)))
        grad = xb.T @ (p - y) / len(y) + l2 * w
        w -= lr * grad
    return w


def baseline_accuracy(samples, train_frac: float = 0.6, seed: int = 0) -> float:
    """In-domain accuracy of the pixel-statistics baseline."""
    feats = np.stack([sample_features(s.image, s.mask) for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.float64)
    mu, sd = feats.mean(axis=0), feats.std(axis=0)
    sd[sd == 0] = 1.0
    feats = (feats - mu) / sd

    order = rng_from(seed, 99).permutation(len(samples))
    n_train = max(2, int(round(train_frac * len(samples))))
    tr, te = order[:n_train], order[n_train:]
    if len(te) == 0:
        raise ValueError("not enough samples to hold out a test set")
    w = _fit_logistic(feats[tr], labels[tr])
    xte = np.hstack([feats[te], np.ones((len(te), 1))])
    pred = (xte @ w > 0).astype(np.float64)
    return float(np.mean(pred == labels[te]))

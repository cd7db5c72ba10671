"""Morphology-guided contrastive objective and classification losses.

The alignment loss pulls each mask embedding toward the matching augmented
patch embedding (cosine attraction) and pushes it away from the other
patches in the batch once their cosine similarity exceeds the margin
(squared hinge repulsion). Classification is a dual binary cross-entropy
over the primary prediction and the mask-derived secondary prediction.
All functions return exact analytic gradients alongside values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] inside BCE so the
# loss stays finite; gradients are zeroed where the clamp is active.
PROB_EPS = 1e-7


@dataclass
class BatchEmbeddings:
    """The three embedding matrices entering the alignment loss.

    z_mask are the anchors, z_aug the positives, z_img the embeddings of
    the raw patches which double as negatives for the other anchors.
    """

    z_mask: np.ndarray  # (N, d)
    z_aug: np.ndarray   # (N, d)
    z_img: np.ndarray   # (N, d)

    def __post_init__(self) -> None:
        if not (self.z_mask.shape == self.z_aug.shape == self.z_img.shape):
            raise ValueError(
                f"embedding shape mismatch: {self.z_mask.shape} / "
                f"{self.z_aug.shape} / {self.z_img.shape}"
            )
        if self.z_mask.ndim != 2:
            raise ValueError("embeddings must be 2-D (N, d) matrices")

    @property
    def n(self) -> int:
        return self.z_mask.shape[0]


@dataclass
class ContrastiveConfig:
    """Repulsion weight and similarity margin of the alignment loss."""

    lam: float = 1.0
    eta: float = 0.3

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not -1.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [-1, 1], got {self.eta}")


@dataclass
class LabelBatch:
    """Labels with primary and secondary predicted probabilities."""

    y: np.ndarray             # (N,) binary
    y_hat: np.ndarray         # (N,) probabilities
    y_hat_prime: np.ndarray   # (N,) probabilities


@dataclass
class LossBreakdown:
    attract: float
    repel: float
    align: float
    bce: float
    total: float

    def as_dict(self) -> dict:
        return {
            "attract": self.attract,
            "repel": self.repel,
            "align": self.align,
            "bce": self.bce,
            "total": self.total,
        }


def _row_norms(mat: np.ndarray, name: str) -> np.ndarray:
    norms = np.sqrt(np.sum(mat * mat, axis=1))
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"zero-norm row {bad} in {name}: cosine undefined")
    return norms


def attract_loss(emb: BatchEmbeddings):
    """Mean cosine distance between anchors and positives.

    Returns (value, grad_z_mask, grad_z_aug). Value lies in [0, 2].
    """
    n = emb.n
    if n < 1:
        raise ValueError("attract_loss needs N >= 1")
    nm = _row_norms(emb.z_mask, "z_mask")
    na = _row_norms(emb.z_aug, "z_aug")
    mhat = emb.z_mask / nm[:, None]
    ahat = emb.z_aug / na[:, None]
    cos = np.sum(mhat * ahat, axis=1)
    value = float(np.sum(1.0 - cos) / n)

    # d value / d mhat_i = -ahat_i / N, then chain through normalisation.
    g_mhat = -ahat / n
    g_ahat = -mhat / n
    grad_mask = (g_mhat - np.sum(g_mhat * mhat, axis=1)[:, None] * mhat) / nm[:, None]
    grad_aug = (g_ahat - np.sum(g_ahat * ahat, axis=1)[:, None] * ahat) / na[:, None]
    return value, grad_mask, grad_aug


def repel_loss(emb: BatchEmbeddings, cfg: ContrastiveConfig):
    """Squared-hinge penalty on mask-vs-other-patch cosine similarity.

    Returns (value, grad_z_img, grad_z_mask). The pair (i, j) contributes
    max(0, cos(z_img_j, z_mask_i) - eta)^2 for j != i, scaled by
    lam / (N (N - 1)). At cos == eta exactly the hinge and its derivative
    are both zero.
    """
    n = emb.n
    if n < 2:
        raise ValueError("repel_loss needs N >= 2 (normaliser N(N-1) is zero)")
    nm = _row_norms(emb.z_mask, "z_mask")
    nz = _row_norms(emb.z_img, "z_img")
    mhat = emb.z_mask / nm[:, None]
    zhat = emb.z_img / nz[:, None]

    sim = mhat @ zhat.T            # sim[i, j] = cos(z_img_j, z_mask_i)
    hinge = sim - cfg.eta
    np.fill_diagonal(hinge, 0.0)
    hinge = np.maximum(hinge, 0.0)
    scale = cfg.lam / (n * (n - 1))
    value = float(scale * np.sum(hinge * hinge))

    g_sim = 2.0 * scale * hinge    # zero on diagonal and inactive hinges
    g_mhat = g_sim @ zhat
    g_zhat = g_sim.T @ mhat
    grad_mask = (g_mhat - np.sum(g_mhat * mhat, axis=1)[:, None] * mhat) / nm[:, None]
    grad_img = (g_zhat - np.sum(g_zhat * zhat, axis=1)[:, None] * zhat) / nz[:, None]
    return value, grad_img, grad_mask


def align_loss(emb: BatchEmbeddings, cfg: ContrastiveConfig):
    """Sum of attraction and repulsion terms with merged gradients.

    Returns (value, grad_z_mask, grad_z_aug, grad_z_img).
    """
    a_val, a_gmask, a_gaug = attract_loss(emb)
    r_val, r_gimg, r_gmask = repel_loss(emb, cfg)
    return a_val + r_val, a_gmask + r_gmask, a_gaug, r_gimg


def bce(y: np.ndarray, p: np.ndarray):
    """Mean binary cross-entropy with probability clamping.

    Returns (value, grad_wrt_logits). The logit gradient is (p - y) / N on
    the unclamped region and 0 where the clamp saturates, so it agrees
    with finite differences of the clamped loss.
    """
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"label/probability shape mismatch: {y.shape} vs {p.shape}")
    n = y.shape[0]
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    value = float(-np.sum(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)) / n)
    active = (p >= PROB_EPS) & (p <= 1.0 - PROB_EPS)
    grad_logits = np.where(active, (pc - y) / n, 0.0)
    return value, grad_logits


def dual_bce(batch: LabelBatch):
    """BCE(y, y_hat) + BCE(y, y_hat_prime) against the same labels.

    Returns (value, grad_logits_primary, grad_logits_secondary).
    """
    v1, g1 = bce(batch.y, batch.y_hat)
    v2, g2 = bce(batch.y, batch.y_hat_prime)
    return v1 + v2, g1, g2


def total_loss(emb: BatchEmbeddings, cfg: ContrastiveConfig, batch: LabelBatch):
    """Full objective: alignment plus dual BCE.

    Returns (LossBreakdown, grads) where grads maps
    {"z_mask", "z_aug", "z_img", "logits", "logits_prime"} to arrays.
    The embedding gradients cover only the alignment term; the harness
    adds the classifier-head chain when predictions are produced from
    these same embeddings.
    """
    if not (emb.n == batch.y.shape[0] == batch.y_hat.shape[0] == batch.y_hat_prime.shape[0]):
        raise ValueError(
            f"batch size mismatch: embeddings N={emb.n}, labels {batch.y.shape[0]}, "
            f"y_hat {batch.y_hat.shape[0]}, y_hat_prime {batch.y_hat_prime.shape[0]}"
        )
    a_val, a_gmask, a_gaug = attract_loss(emb)
    r_val, r_gimg, r_gmask = repel_loss(emb, cfg)
    b_val, g_logits, g_logits_prime = dual_bce(batch)
    breakdown = LossBreakdown(
        attract=a_val,
        repel=r_val,
        align=a_val + r_val,
        bce=b_val,
        total=a_val + r_val + b_val,
    )
    grads = {
        "z_mask": a_gmask + r_gmask,
        "z_aug": a_gaug,
        "z_img": r_gimg,
        "logits": g_logits,
        "logits_prime": g_logits_prime,
    }
    return breakdown, grads

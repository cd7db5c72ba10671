"""Shared convolutional encoder with exact analytic gradients.

The encoder is a small stack of stride-2 conv blocks (GELU activations),
global average pooling, and a linear projection into the embedding space.
One parameter set processes images, augmentations, and channel-replicated
masks alike. Everything runs in float64 by default so forward passes are
bitwise reproducible and gradients can be checked against central finite
differences.

Checkpoints are directories holding ``header.json`` (architecture, schema
version, parameter-ordering manifest) plus ``params.f32``, a little-endian
float32 blob of all parameters concatenated in manifest order. Extra
float64 blobs (optimizer moments, weight averages) ride along for exact
training resumption.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .seeding import rng_from

CHECKPOINT_SCHEMA_VERSION = 1
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
# Fixed shift applied to encoder inputs, and the epsilon of the
# parameter-free per-sample feature standardisation after pooling. Both
# are stateless constants: no running statistics anywhere, so weight
# averaging needs no statistics-recomputation pass.
INPUT_SHIFT = 0.5
FEAT_NORM_EPS = 1e-6


@dataclass(frozen=True)
class ArchConfig:
    """Shape of the encoder; fixed at init and recorded in checkpoints."""

    in_channels: int = 3
    channels: tuple = (16, 32, 64)
    kernel_size: int = 3
    stride: int = 2
    embed_dim: int = 128

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.embed_dim < 1:
            raise ValueError("in_channels and embed_dim must be >= 1")
        if len(self.channels) < 1 or any(c < 1 for c in self.channels):
            raise ValueError(f"invalid channel widths {self.channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "embed_dim": self.embed_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(
            in_channels=int(d["in_channels"]),
            channels=tuple(int(c) for c in d["channels"]),
            kernel_size=int(d["kernel_size"]),
            stride=int(d["stride"]),
            embed_dim=int(d["embed_dim"]),
        )


@dataclass
class ConvBlockParams:
    kernels: np.ndarray  # (K, K, Cin, Cout)
    bias: np.ndarray     # (Cout,)


@dataclass
class EncoderParams:
    conv_blocks: list
    proj_weight: np.ndarray  # (C_last, d)
    proj_bias: np.ndarray    # (d,)


@dataclass
class HeadParams:
    weight: np.ndarray  # (d,)
    bias: float


@dataclass
class ForwardCache:
    """Intermediates of one encode() call, consumed by at most one backward."""

    input_shapes: list = field(default_factory=list)   # unpadded input shape per block
    cols: list = field(default_factory=list)           # im2col columns per block
    preacts: list = field(default_factory=list)        # pre-GELU activations
    gelu_cdfs: list = field(default_factory=list)      # cached Phi(preact) terms
    pooled_hw: tuple = (0, 0)                          # spatial size entering the pool
    feat_hat: np.ndarray | None = None                 # standardised pooled features
    inv_sigma: np.ndarray | None = None                # 1/sqrt(var + eps) per sample
    consumed: bool = False


def init_params(arch: ArchConfig, seed: int):
    """He fan-in initialised kernels, zero biases; deterministic in seed."""
    blocks = []
    cin = arch.in_channels
    k = arch.kernel_size
    for li, cout in enumerate(arch.channels):
        fan_in = k * k * cin
        rng = rng_from(seed, 101, li)
        kernels = rng.standard_normal((k, k, cin, cout)) * np.sqrt(2.0 / fan_in)
        blocks.append(ConvBlockParams(kernels=kernels, bias=np.zeros(cout)))
        cin = cout
    rng = rng_from(seed, 202)
    proj_w = rng.standard_normal((cin, arch.embed_dim)) * np.sqrt(2.0 / cin)
    enc = EncoderParams(conv_blocks=blocks, proj_weight=proj_w,
                        proj_bias=np.zeros(arch.embed_dim))
    # Zero-initialised readout: training starts from calibrated p = 0.5
    # instead of the arbitrary saturated logits a random readout produces.
    head = HeadParams(weight=np.zeros(arch.embed_dim), bias=0.0)
    return enc, head


def _gelu_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2))


# Scratch pool for the padded-gradient buffers of the backward pass; they
# are call-local, fully overwritten before use, keyed by layer, and
# thread-local. Keeping them out of the allocator avoids remapping fresh
# pages on every training step. Column buffers are NOT pooled: they live
# in the ForwardCache across the multiple encode() passes of one step.
_workspace = threading.local()


def _scratch(key: tuple, shape: tuple) -> np.ndarray:
    buffers = getattr(_workspace, "buffers", None)
    if buffers is None:
        buffers = _workspace.buffers = {}
    buf = buffers.get(key)
    if buf is None or buf.shape != shape:
        buf = buffers[key] = np.empty(shape)
    return buf


def _im2col(xp: np.ndarray, k: int, stride: int):
    """Padded input (N, Hp, Wp, C) -> columns (N*Ho*Wo, k*k*C)."""
    n, hp, wp, c = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = np.empty((n, ho, wo, k, k, c))
    for ki in range(k):
        for kj in range(k):
            cols[:, :, :, ki, kj, :] = xp[:, ki:ki + stride * ho:stride,
                                          kj:kj + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, k * k * c), ho, wo


def _conv_forward(x: np.ndarray, block: ConvBlockParams, stride: int):
    k = block.kernels.shape[0]
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols, ho, wo = _im2col(xp, k, stride)
    wmat = block.kernels.reshape(-1, block.kernels.shape[-1])
    pre = cols @ wmat + block.bias
    return pre.reshape(x.shape[0], ho, wo, -1), cols


def _conv_backward(cols: np.ndarray, in_shape: tuple, block: ConvBlockParams,
                   stride: int, layer: int, dpre: np.ndarray,
                   need_input_grad: bool):
    k = block.kernels.shape[0]
    pad = (k - 1) // 2
    n, ho, wo, cout = dpre.shape
    dpre_flat = dpre.reshape(-1, cout)
    dw = (cols.T @ dpre_flat).reshape(block.kernels.shape)
    db = dpre_flat.sum(axis=0)
    dx = None
    if need_input_grad:
        _, h, w, cin = in_shape
        wmat = block.kernels.reshape(-1, cout)
        dcols = (dpre_flat @ wmat.T).reshape(n, ho, wo, k, k, cin)
        dxp = _scratch(("dxp", layer), (n, h + 2 * pad, w + 2 * pad, cin))
        dxp.fill(0.0)
        for ki in range(k):
            for kj in range(k):
                dxp[:, ki:ki + stride * ho:stride,
                    kj:kj + stride * wo:stride, :] += dcols[:, :, :, ki, kj, :]
        dx = dxp[:, pad:pad + h, pad:pad + w, :]
    return dw, db, dx


def encode(enc: EncoderParams, batch: np.ndarray, arch: ArchConfig):
    """Map a (N, H, W, C) batch to (N, d) embeddings; returns a cache.

    Masks must be channel-replicated (see replicate_mask_channels) before
    entering the shared encoder.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[-1] != arch.in_channels:
        raise ValueError(
            f"expected (N, H, W, {arch.in_channels}) batch, got {batch.shape}"
        )
    if not np.all(np.isfinite(batch)):
        raise ValueError("non-finite values in encoder input")
    cache = ForwardCache()
    x = batch - INPUT_SHIFT
    for block in enc.conv_blocks:
        cache.input_shapes.append(x.shape)
        pre, cols = _conv_forward(x, block, arch.stride)
        cache.cols.append(cols)
        cache.preacts.append(pre)
        cdf = _gelu_cdf(pre)
        cache.gelu_cdfs.append(cdf)
        x = pre * cdf
    cache.pooled_hw = (x.shape[1], x.shape[2])
    pooled = x.mean(axis=(1, 2))
    # Parameter-free per-sample standardisation across feature channels.
    mu = pooled.mean(axis=1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(pooled.var(axis=1, keepdims=True) + FEAT_NORM_EPS)
    feat_hat = (pooled - mu) * inv_sigma
    cache.feat_hat = feat_hat
    cache.inv_sigma = inv_sigma
    z = feat_hat @ enc.proj_weight + enc.proj_bias
    return z, cache


def replicate_mask_channels(mask: np.ndarray) -> np.ndarray:
    """(N, H, W, 1) binary masks -> (N, H, W, 3) float batch."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 4 or mask.shape[-1] != 1:
        raise ValueError(f"expected (N, H, W, 1) masks, got {mask.shape}")
    return np.repeat(mask, 3, axis=3)


@dataclass
class EncoderGrads:
    conv_blocks: list            # list of (dkernels, dbias)
    proj_weight: np.ndarray
    proj_bias: np.ndarray


def backward(enc: EncoderParams, cache: ForwardCache, dz: np.ndarray,
             arch: ArchConfig, need_input_grad: bool = False):
    """Exact gradients of a scalar loss through one encode() call.

    dz is dLoss/dEmbeddings of shape (N, d). Returns (EncoderGrads,
    input_grad or None). A cache can only back one backward pass.
    """
    if cache.consumed:
        raise RuntimeError("ForwardCache already consumed by a backward pass")
    cache.consumed = True
    dz = np.asarray(dz, dtype=np.float64)
    if dz.shape != (cache.feat_hat.shape[0], enc.proj_weight.shape[1]):
        raise ValueError(f"upstream gradient shape {dz.shape} mismatch")

    d_proj_w = cache.feat_hat.T @ dz
    d_proj_b = dz.sum(axis=0)
    d_hat = dz @ enc.proj_weight.T
    # standardisation backward: dg = (dh - mean(dh) - ghat * mean(dh*ghat)) / sigma
    ghat = cache.feat_hat
    d_pooled = cache.inv_sigma * (
        d_hat
        - d_hat.mean(axis=1, keepdims=True)
        - ghat * (d_hat * ghat).mean(axis=1, keepdims=True)
    )

    hw = cache.pooled_hw[0] * cache.pooled_hw[1]
    d_act = np.broadcast_to(
        d_pooled[:, None, None, :] / hw,
        (dz.shape[0],) + cache.pooled_hw + (d_pooled.shape[1],),
    )

    block_grads = [None] * len(enc.conv_blocks)
    upstream = d_act
    for bi in range(len(enc.conv_blocks) - 1, -1, -1):
        pre = cache.preacts[bi]
        # d gelu / d pre = Phi(pre) + pre * phi(pre), with Phi cached
        gelu_grad = cache.gelu_cdfs[bi] + pre * (
            np.exp(-0.5 * pre * pre) * _INV_SQRT_2PI)
        dpre = upstream * gelu_grad
        need_dx = need_input_grad or bi > 0
        dw, db, dx = _conv_backward(
            cache.cols[bi], cache.input_shapes[bi], enc.conv_blocks[bi],
            arch.stride, bi, dpre, need_dx
        )
        block_grads[bi] = (dw, db)
        upstream = dx
    grads = EncoderGrads(conv_blocks=block_grads, proj_weight=d_proj_w,
                         proj_bias=d_proj_b)
    # upstream views scratch storage; hand the caller a stable copy
    return grads, (upstream.copy() if need_input_grad else None)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def classify(head: HeadParams, z: np.ndarray):
    """Probabilities sigmoid(w . z + b); returns (probs, logits)."""
    z = np.asarray(z, dtype=np.float64)
    logits = z @ head.weight + head.bias
    return sigmoid(logits), logits


def head_backward(head: HeadParams, z: np.ndarray, d_logits: np.ndarray):
    """Gradients of a loss given dLoss/dlogits: (dw, db, dz)."""
    dw = z.T @ d_logits
    db = float(np.sum(d_logits))
    dz = d_logits[:, None] * head.weight[None, :]
    return dw, db, dz


# ---------------------------------------------------------------------------
# Flat parameter vector <-> structured parameters
# ---------------------------------------------------------------------------

def parameter_manifest(arch: ArchConfig) -> list:
    """Ordered (name, shape) pairs defining the flat layout."""
    entries = []
    cin = arch.in_channels
    k = arch.kernel_size
    for li, cout in enumerate(arch.channels):
        entries.append((f"conv{li}.kernels", (k, k, cin, cout)))
        entries.append((f"conv{li}.bias", (cout,)))
        cin = cout
    entries.append(("proj.weight", (cin, arch.embed_dim)))
    entries.append(("proj.bias", (arch.embed_dim,)))
    entries.append(("head.weight", (arch.embed_dim,)))
    entries.append(("head.bias", (1,)))
    return entries


def n_parameters(arch: ArchConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in parameter_manifest(arch))


def to_vector(enc: EncoderParams, head: HeadParams) -> np.ndarray:
    parts = []
    for block in enc.conv_blocks:
        parts.append(block.kernels.ravel())
        parts.append(block.bias.ravel())
    parts.append(enc.proj_weight.ravel())
    parts.append(enc.proj_bias.ravel())
    parts.append(np.asarray(head.weight, dtype=np.float64).ravel())
    parts.append(np.asarray([head.bias], dtype=np.float64))
    return np.concatenate(parts).astype(np.float64)


def from_vector(vec: np.ndarray, arch: ArchConfig):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (n_parameters(arch),):
        raise ValueError(
            f"expected vector of length {n_parameters(arch)}, got {vec.shape}"
        )
    fields = {}
    off = 0
    for name, shape in parameter_manifest(arch):
        size = int(np.prod(shape))
        fields[name] = vec[off:off + size].reshape(shape).copy()
        off += size
    blocks = []
    for li in range(len(arch.channels)):
        blocks.append(ConvBlockParams(kernels=fields[f"conv{li}.kernels"],
                                      bias=fields[f"conv{li}.bias"]))
    enc = EncoderParams(conv_blocks=blocks, proj_weight=fields["proj.weight"],
                        proj_bias=fields["proj.bias"])
    head = HeadParams(weight=fields["head.weight"], bias=float(fields["head.bias"][0]))
    return enc, head


def grads_to_vector(grads: EncoderGrads, d_head_w: np.ndarray,
                    d_head_b: float) -> np.ndarray:
    parts = []
    for dw, db in grads.conv_blocks:
        parts.append(dw.ravel())
        parts.append(db.ravel())
    parts.append(grads.proj_weight.ravel())
    parts.append(grads.proj_bias.ravel())
    parts.append(np.asarray(d_head_w, dtype=np.float64).ravel())
    parts.append(np.asarray([d_head_b], dtype=np.float64))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Checkpoint IO
# ---------------------------------------------------------------------------

def _resolve_ckpt_dir(path) -> Path:
    p = Path(path)
    if p.name == "header.json":
        return p.parent
    return p


def save_checkpoint(path, arch: ArchConfig, enc: EncoderParams,
                    head: HeadParams, extra: dict | None = None,
                    meta: dict | None = None) -> None:
    """Write header.json + params.f32 (+ one .f64 blob per extra entry)."""
    ckpt = _resolve_ckpt_dir(path)
    ckpt.mkdir(parents=True, exist_ok=True)
    manifest = parameter_manifest(arch)
    header = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "arch": arch.to_dict(),
        "d": arch.embed_dim,
        "manifest": [{"name": n, "shape": list(s)} for n, s in manifest],
        "param_dtype": "<f4",
        "extra_blobs": sorted(extra.keys()) if extra else [],
        "meta": meta or {},
    }
    (ckpt / "header.json").write_text(
        json.dumps(header, sort_keys=True, indent=2) + "\n"
    )
    vec32 = to_vector(enc, head).astype("<f4")
    (ckpt / "params.f32").write_bytes(vec32.tobytes())
    if extra:
        for name in sorted(extra.keys()):
            arr = np.asarray(extra[name], dtype="<f8")
            (ckpt / f"{name}.f64").write_bytes(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint directory; returns (arch, enc, head, extra, meta)."""
    ckpt = _resolve_ckpt_dir(path)
    header = json.loads((ckpt / "header.json").read_text())
    if header["schema_version"] != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(
            f"checkpoint schema {header['schema_version']} not supported"
        )
    arch = ArchConfig.from_dict(header["arch"])
    raw = np.frombuffer((ckpt / "params.f32").read_bytes(), dtype="<f4")
    enc, head = from_vector(raw.astype(np.float64), arch)
    extra = {}
    for name in header.get("extra_blobs", []):
        extra[name] = np.frombuffer((ckpt / f"{name}.f64").read_bytes(),
                                    dtype="<f8").copy()
    return arch, enc, head, extra, header.get("meta", {})

"""Dataset assembly and on-disk format.

A dataset directory holds ``manifest.json`` plus, per split, a
little-endian float32 image blob (sample-major, row-major, channel-last)
and a packed-bit mask blob. Labels, domain ids, and geometry seeds are
small and live in the manifest. Evaluation-only exports may omit the mask
blobs entirely; readers tolerate that.

Per-sample seeds are SplitMix-derived from (base_seed, sample index), so
generation is embarrassingly parallel and the result is identical
regardless of the order samples are produced in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..seeding import derive_seed
from .geometry import GeometrySpec, generate_geometry
from .render import DOMAIN_TABLE, DomainSpec, render_image, render_mask

DATASET_SCHEMA_VERSION = 1
DEFAULT_COUNT_RANGE = (6, 14)


@dataclass
class SamplePair:
    image: np.ndarray       # (H, W, 3) float64 in [0, 1]
    mask: np.ndarray        # (H, W, 1) uint8 binary
    label: int
    domain_id: int
    geometry_seed: int


def sample_geometry_seed(base_seed: int, sample_index: int) -> int:
    return derive_seed(base_seed, sample_index)


def sample_render_seed(base_seed: int, sample_index: int) -> int:
    return derive_seed(base_seed, sample_index, 977)


def build_sample(base_seed: int, sample_index: int, class_label: int,
                 domain: DomainSpec, resolution: int,
                 count_range: tuple = DEFAULT_COUNT_RANGE) -> SamplePair:
    """One SamplePair, a pure function of its arguments."""
    gseed = sample_geometry_seed(base_seed, sample_index)
    geom = generate_geometry(gseed, class_label, count_range)
    mask = render_mask(geom, resolution)
    image = render_image(geom, domain, resolution,
                         sample_render_seed(base_seed, sample_index))
    return SamplePair(image=image, mask=mask, label=class_label,
                      domain_id=domain.domain_id, geometry_seed=gseed)


def make_dataset(n_per_class: int, domains, resolution: int, base_seed: int,
                 count_range: tuple = DEFAULT_COUNT_RANGE) -> list:
    """All (geometry, class) pairs rendered under every domain.

    Returns 2 * n_per_class * len(domains) samples ordered by
    (class, index, domain). Masks for a given sample index are identical
    across domains.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    samples = []
    for class_label in (0, 1):
        for i in range(n_per_class):
            sample_index = class_label * n_per_class + i
            gseed = sample_geometry_seed(base_seed, sample_index)
            geom = generate_geometry(gseed, class_label, count_range)
            mask = render_mask(geom, resolution)
            rseed = sample_render_seed(base_seed, sample_index)
            for domain in domains:
                image = render_image(geom, domain, resolution, rseed)
                samples.append(SamplePair(image=image, mask=mask.copy(),
                                          label=class_label,
                                          domain_id=domain.domain_id,
                                          geometry_seed=gseed))
    return samples


@dataclass
class SplitData:
    images: np.ndarray        # (N, H, W, 3) float64
    masks: np.ndarray | None  # (N, H, W, 1) uint8, None for image-only exports
    labels: np.ndarray        # (N,) int
    domain_ids: np.ndarray    # (N,) int
    geometry_seeds: list

    def __len__(self) -> int:
        return self.images.shape[0]

    def filter_domain(self, domain_id: int) -> "SplitData":
        sel = self.domain_ids == domain_id
        if not np.any(sel):
            raise ValueError(f"domain {domain_id} not present in split")
        return SplitData(
            images=self.images[sel],
            masks=self.masks[sel] if self.masks is not None else None,
            labels=self.labels[sel],
            domain_ids=self.domain_ids[sel],
            geometry_seeds=[s for s, keep in zip(self.geometry_seeds, sel) if keep],
        )


def write_dataset(out_dir, splits: dict, resolution: int, base_seed: int,
                  domains=DOMAIN_TABLE, include_masks: bool = True,
                  meta: dict | None = None) -> None:
    """Serialise {split_name: [SamplePair, ...]} into a dataset directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "resolution": resolution,
        "base_seed": base_seed,
        "domains": [d.to_dict() for d in domains],
        "include_masks": include_masks,
        "splits": {},
        "meta": meta or {},
    }
    for name in sorted(splits.keys()):
        samples = splits[name]
        images = np.stack([s.image for s in samples]).astype("<f4")
        (out / f"{name}.images.f32").write_bytes(images.tobytes())
        if include_masks:
            masks = np.stack([s.mask for s in samples]).astype(np.uint8)
            (out / f"{name}.masks.bin").write_bytes(np.packbits(masks).tobytes())
        manifest["splits"][name] = {
            "count": len(samples),
            "labels": [int(s.label) for s in samples],
            "domain_ids": [int(s.domain_id) for s in samples],
            "geometry_seeds": [int(s.geometry_seed) for s in samples],
        }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )


def read_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())


def read_split(data_dir, name: str, require_masks: bool = False) -> SplitData:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    if name not in manifest["splits"]:
        raise ValueError(f"split '{name}' not in dataset {data_dir}")
    info = manifest["splits"][name]
    count = info["count"]
    res = manifest["resolution"]
    raw = np.frombuffer((data_dir / f"{name}.images.f32").read_bytes(), dtype="<f4")
    images = raw.reshape(count, res, res, 3).astype(np.float64)
    masks = None
    mask_path = data_dir / f"{name}.masks.bin"
    if mask_path.exists():
        bits = np.unpackbits(np.frombuffer(mask_path.read_bytes(), dtype=np.uint8))
        masks = bits[: count * res * res].reshape(count, res, res, 1).astype(np.uint8)
    elif require_masks:
        raise FileNotFoundError(f"mask blob missing for split '{name}' in {data_dir}")
    return SplitData(
        images=images,
        masks=masks,
        labels=np.array(info["labels"], dtype=np.int64),
        domain_ids=np.array(info["domain_ids"], dtype=np.int64),
        geometry_seeds=list(info["geometry_seeds"]),
    )


def domains_from_manifest(manifest: dict):
    return tuple(DomainSpec.from_dict(d) for d in manifest["domains"])

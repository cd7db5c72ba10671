"""Procedural multi-domain morphology dataset."""

from .augment import AugmentConfig, augment, sample_augment_params
from .dataset import (
    DEFAULT_COUNT_RANGE,
    SamplePair,
    SplitData,
    build_sample,
    domains_from_manifest,
    make_dataset,
    read_manifest,
    read_split,
    write_dataset,
)
from .geometry import (
    Ellipse,
    GeometrySpec,
    generate_geometry,
    geometry_from_json,
    geometry_to_json,
)
from .render import DOMAIN_TABLE, DomainSpec, render_base, render_image, render_mask
from .validate import baseline_accuracy, sample_features

__all__ = [
    "AugmentConfig",
    "augment",
    "sample_augment_params",
    "DEFAULT_COUNT_RANGE",
    "SamplePair",
    "SplitData",
    "build_sample",
    "domains_from_manifest",
    "make_dataset",
    "read_manifest",
    "read_split",
    "write_dataset",
    "Ellipse",
    "GeometrySpec",
    "generate_geometry",
    "geometry_from_json",
    "geometry_to_json",
    "DOMAIN_TABLE",
    "DomainSpec",
    "render_base",
    "render_image",
    "render_mask",
    "baseline_accuracy",
    "sample_features",
]

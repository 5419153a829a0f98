"""Concept reachability in small text-conditioned diffusion models."""

from .concepts import (
    COLORS,
    FULL_MASK,
    MASK_LADDER,
    SHAPES,
    ConceptTuple,
    DatasetSpec,
    Factor,
    OodClass,
    PartialTuple,
    SpecificationMask,
    apply_bias,
    apply_removal,
    apply_scarcity,
    baseline_spec,
    caption_of,
    classify_ood,
    enumerate_valid_tuples,
    parse_caption,
    subset_size,
)

__version__ = "0.1.0"

"""Model catalog: specs, toy scaling, batch grids and builders."""

from .build import build
from .spec import (
    LABELS,
    PAPER_COMPLEXITY,
    PRETRAINED_FAMILIES,
    SEQUENCE_FAMILIES,
    Family,
    ModelSpec,
    Scale,
    batch_grid,
    describe,
    paper_catalog,
    paper_spec,
    toy_scale,
)

__all__ = [
    "LABELS", "PAPER_COMPLEXITY", "PRETRAINED_FAMILIES", "SEQUENCE_FAMILIES", "Family", "ModelSpec", "Scale",
    "batch_grid", "build", "describe", "paper_catalog", "paper_spec", "toy_scale",
]

from __future__ import annotations

import logging
from pathlib import Path

import torch
import torch.nn as nn

from ..errors import PretrainedWeightsUnavailable
from .models import REGISTRY
from .spec import PRETRAINED_FAMILIES, ModelSpec, Scale

log = logging.getLogger(__name__)


def build(spec: ModelSpec, seed: int | None = None, allow_random_init: bool = False) -> nn.Module:
    """Instantiate the model described by ``spec``.

    With ``seed`` the initialisation is drawn from a private generator state,
    so the global torch RNG is left untouched and the same seed always gives
    the same weights. PAPER-scale pretrained families load their backbone from
    ``spec.params['weights']``; ``allow_random_init`` skips that requirement
    (used when only shapes and complexity matter).
    """
    weights = spec.params.get("weights")
    needs_weights = spec.scale == Scale.PAPER and spec.family in PRETRAINED_FAMILIES
    if needs_weights and weights is None and not allow_random_init:
        raise PretrainedWeightsUnavailable(
            f"{spec.family.value} at PAPER scale needs a pretrained backbone file (params.weights); "
            "use the TOY scale to run without downloads"
        )
    if weights is not None and not Path(weights).is_file():
        raise PretrainedWeightsUnavailable(f"pretrained weights file not found: {weights}")

    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        model = REGISTRY[spec.family](spec)

    if weights is not None:
        state = torch.load(weights, map_location="cpu", weights_only=True)
        missing, unexpected = model.backbone.load_state_dict(state, strict=False)
        if unexpected or missing:
            raise PretrainedWeightsUnavailable(
                f"weights in {weights} do not match the backbone (missing={list(missing)[:5]}, "
                f"unexpected={list(unexpected)[:5]})"
            )
        log.info("loaded pretrained backbone from %s", weights)
    return model

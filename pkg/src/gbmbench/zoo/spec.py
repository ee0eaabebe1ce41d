"""Declarative model specifications for the eleven architecture families."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any

from ..errors import UnknownFamily


class Family(str, enum.Enum):
    CNN3D = "CNN3D"
    LSTM = "LSTM"
    VIT3D = "VIT3D"
    RESNET3D = "RESNET3D"
    CNN_LSTM = "CNN_LSTM"
    CNN_SE = "CNN_SE"
    VIT2D_LSTM = "VIT2D_LSTM"
    SWIN3D = "SWIN3D"
    SWIN_CNN = "SWIN_CNN"
    MAMBA2D = "MAMBA2D"
    MAMBA2D_CNN = "MAMBA2D_CNN"

    @classmethod
    def parse(cls, name: "str | Family") -> "Family":
        if isinstance(name, Family):
            return name
        key = str(name).strip().upper().replace("-", "_").replace("+", "_")
        try:
            return cls(key)
        except ValueError:
            raise UnknownFamily(f"unknown model family {name!r}; known: {', '.join(f.value for f in cls)}") from None


class Scale(str, enum.Enum):
    PAPER = "PAPER"
    TOY = "TOY"


#: families whose forward pass walks an ordered stack of axial slices
SEQUENCE_FAMILIES = (Family.LSTM, Family.CNN_LSTM, Family.VIT2D_LSTM, Family.MAMBA2D)
#: families whose PAPER-scale build expects pretrained backbone weights
PRETRAINED_FAMILIES = (Family.VIT2D_LSTM, Family.MAMBA2D, Family.MAMBA2D_CNN)

# Constants per family. Keys listed in _WIDTH_KEYS are channel/feature
# widths and shrink under toy_scale.
_PAPER_PARAMS: dict[Family, dict[str, Any]] = {
    Family.CNN3D: dict(widths=(8, 16, 32), pool_grid=(4, 4, 4)),
    Family.LSTM: dict(n_slices=128, hidden=128),
    Family.VIT3D: dict(patch=16, embed=512, depth=8, heads=8, mlp_ratio=4.0, proj_dim=2048),
    Family.RESNET3D: dict(stem=8, widths=(16, 32, 64), blocks_per_stage=2, pool_grid=(2, 4, 4)),
    Family.CNN_LSTM: dict(widths=(8, 16), inplane_grid=4, n_slices=128, hidden=128),
    Family.CNN_SE: dict(widths=(16, 32, 32), se_reduction=4, pool_grid=(4, 4, 4)),
    Family.VIT2D_LSTM: dict(
        n_slices=128, image_size=224, patch=16, embed=768, depth=12, heads=12,
        mlp_ratio=4.0, hidden=128, weights=None,
    ),
    Family.SWIN3D: dict(
        patch=4, embed=48, depths=(2, 2, 6, 2), heads=(3, 6, 12, 24), window=4,
        mlp_ratio=4.0, proj_dim=128,
    ),
    Family.SWIN_CNN: dict(widths=(16, 32), window=8, shifted=True, proj_dim=128),
    Family.MAMBA2D: dict(
        n_slices=50, image_size=224, patch=16, embed=384, depth=24, d_state=16,
        d_conv=4, expand=2, proj_dim=128, weights=None,
    ),
    Family.MAMBA2D_CNN: dict(
        n_slices=50, image_size=224, patch=16, embed=384, depth=24, d_state=16,
        d_conv=4, expand=2, proj_dim=128, cnn_widths=(32, 64, 128), weights=None,
    ),
}

_WIDTH_KEYS = ("widths", "stem", "embed", "hidden", "proj_dim", "cnn_widths")

PAPER_INPUT = 128
TOY_INPUT = 32
TOY_SLICES = 16

LABELS = {
    Family.CNN3D: "CNN",
    Family.LSTM: "LSTM",
    Family.VIT3D: "3DViT",
    Family.RESNET3D: "ResNet",
    Family.CNN_LSTM: "CNN+LSTM",
    Family.CNN_SE: "CNN+Attention (SE)",
    Family.VIT2D_LSTM: "2DViT+LSTM",
    Family.SWIN3D: "Swin Transformer",
    Family.SWIN_CNN: "CNN+ShiftWindowPatch",
    Family.MAMBA2D: "2D-Mamba",
    Family.MAMBA2D_CNN: "2D-Mamba+CNN",
}


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    scale: Scale = Scale.PAPER
    params: dict[str, Any] = field(default_factory=dict)
    num_classes: int = 3

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        object.__setattr__(self, "scale", Scale(self.scale))
        if self.num_classes != 3:
            raise ValueError("num_classes is fixed at 3")
        merged = dict(_PAPER_PARAMS[self.family])
        merged.setdefault("input_size", PAPER_INPUT)
        merged.update(self.params)
        for k, v in merged.items():
            if isinstance(v, list):
                merged[k] = tuple(v)
        object.__setattr__(self, "params", merged)

    def __getitem__(self, key: str) -> Any:
        return self.params[key]

    def __hash__(self):
        return hash(self.to_json())

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        n = self.params["input_size"]
        return (1, n, n, n)

    @property
    def key(self) -> str:
        """Directory-safe identifier, e.g. ``mamba2d_s16``."""
        name = self.family.value.lower()
        if self.family == Family.MAMBA2D:
            name += f"_s{self.params.get('paper_slices', self.params['n_slices'])}"
        return name

    @property
    def label(self) -> str:
        base = LABELS[self.family]
        if self.family == Family.MAMBA2D:
            n = self.params["n_slices"]
            paper_n = n if self.scale == Scale.PAPER else self.params.get("paper_slices", n)
            base += f" ({paper_n} slices)"
        return base

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "scale": self.scale.value,
            "num_classes": self.num_classes,
            "params": {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.params.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(Family.parse(d["family"]), Scale(d.get("scale", "PAPER")), dict(d.get("params", {})))


def paper_spec(family: Family | str, **overrides) -> ModelSpec:
    return ModelSpec(Family.parse(family), Scale.PAPER, overrides)


def _shrink(v):
    if isinstance(v, tuple):
        return tuple(max(2, x // 4) for x in v)
    return max(2, v // 4)


def toy_scale(spec: ModelSpec) -> ModelSpec:
    """Desk-scale variant with the same block topology.

    Input becomes 32^3 (sequence families read 16 slices of 32^2), widths
    are divided by 4 (floor, min 2), patch and window sizes are kept where
    they still divide the reduced grid, and pretrained weights are dropped.
    """
    if spec.scale == Scale.TOY:
        return spec
    p = dict(spec.params)
    for k in _WIDTH_KEYS:
        if k in p:
            p[k] = _shrink(p[k])
    p["input_size"] = TOY_INPUT
    if "n_slices" in p:
        p["paper_slices"] = p["n_slices"]
        p["n_slices"] = min(TOY_SLICES, TOY_INPUT)
    if "image_size" in p:
        p["image_size"] = TOY_INPUT
    if "patch" in p and TOY_INPUT % p["patch"] != 0:
        p["patch"] = 4
    if "weights" in p:
        p["weights"] = None
    # keep attention heads dividing the reduced embedding
    if "heads" in p and "embed" in p:
        if isinstance(p["heads"], tuple):
            dims = [p["embed"] * 2 ** i for i in range(len(p["heads"]))]
            p["heads"] = tuple(_fit_heads(h, d) for h, d in zip(p["heads"], dims))
        else:
            p["heads"] = _fit_heads(p["heads"], p["embed"])
    return ModelSpec(spec.family, Scale.TOY, p)


def _fit_heads(heads: int, dim: int) -> int:
    while heads > 1 and dim % heads:
        heads -= 1
    return heads


def batch_grid(family: Family | ModelSpec | str) -> tuple[int, ...]:
    """Training batch sizes benchmarked for a family."""
    if isinstance(family, ModelSpec):
        spec = family
        fam = spec.family
        n_slices = spec.params.get("paper_slices", spec.params.get("n_slices"))
    else:
        fam = Family.parse(family)
        n_slices = _PAPER_PARAMS[fam].get("n_slices")
    if fam == Family.MAMBA2D_CNN:
        return (1, 2, 4, 8)
    if fam == Family.SWIN3D or (fam == Family.MAMBA2D and n_slices == 50):
        return (1, 6)
    return (1, 8)


def paper_catalog() -> list[ModelSpec]:
    """Every benchmarked configuration; 2D-Mamba appears with 16 and 50 slices."""
    specs = []
    for fam in Family:
        if fam == Family.MAMBA2D:
            specs.append(paper_spec(fam, n_slices=16))
            specs.append(paper_spec(fam, n_slices=50))
        else:
            specs.append(paper_spec(fam))
    return specs


def describe(family: Family | str) -> dict:
    spec = paper_spec(family)
    return {
        "family": spec.family.value,
        "label": LABELS[spec.family],
        "paper": spec.to_dict()["params"],
        "toy": toy_scale(spec).to_dict()["params"],
        "batch_grid": list(batch_grid(spec)),
        "sequence_model": spec.family in SEQUENCE_FAMILIES,
        "needs_pretrained_weights": spec.family in PRETRAINED_FAMILIES,
    }


#: reported complexity per configuration (first follow-up): GFLOPs, params in millions
PAPER_COMPLEXITY: dict[str, tuple[float, float]] = {
    "vit2d_lstm": (468.6238, 5.6421),
    "vit3d": (277.2708, 88.166),
    "cnn3d": (12.3889, 0.0832),
    "cnn_se": (44.821, 2.4304),
    "cnn_lstm": (5.6613, 1.5707),
    "swin_cnn": (0.0255, 0.0701),
    "lstm": (7.4189, 20.381),
    "mamba2d_s16": (142.9558, 24.515),
    "mamba2d_s50": (446.7358, 24.515),
    "mamba2d_cnn": (0.7776, 24.231),
    "resnet3d": (28.4955, 0.6528),
    "swin3d": (236.9559, 7.8644),
}

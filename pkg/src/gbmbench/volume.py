"""In-memory volume container and NIfTI I/O."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import nibabel as nib
import numpy as np

from .errors import IOFailure


@dataclass
class Volume:
    """A 3D scalar grid with its voxel-to-world affine and optional brain mask.

    ``data`` is indexed ``(x, y, z)`` as stored in NIfTI; ``z`` is the axial
    (slice) axis.
    """

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if self.affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.shape:
                raise ValueError(
                    f"mask shape {self.mask.shape} != data shape {self.data.shape}"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(float(s) for s in np.linalg.norm(self.affine[:3, :3], axis=0))

    def with_(self, **changes) -> "Volume":
        return replace(self, **changes)


def load_nifti(path: str | Path, dtype=np.float64) -> Volume:
    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=dtype)
    except Exception as exc:  # nibabel raises a zoo of exception types
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    return Volume(data=data, affine=img.affine)


def read_header(path: str | Path) -> tuple[tuple[int, ...], tuple[float, ...]]:
    """Return ``(dims, zooms)`` without touching voxel data."""
    try:
        img = nib.load(str(path))
    except Exception as exc:
        raise IOFailure(f"cannot read header of {path}: {exc}") from exc
    dims = tuple(int(d) for d in img.header.get_data_shape()[:3])
    zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    return dims, zooms


def save_nifti(data: np.ndarray, affine: np.ndarray, path: str | Path, dtype=np.float32) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = nib.Nifti1Image(np.asarray(data, dtype=dtype), np.asarray(affine, dtype=np.float64))
    img.header.set_xyzt_units("mm")
    try:
        nib.save(img, str(path))
    except Exception as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path


def save_volume(v: Volume, path: str | Path, mask_path: str | Path | None = None) -> Path:
    out = save_nifti(v.data, v.affine, path)
    if mask_path is not None and v.mask is not None:
        save_nifti(v.mask.astype(np.uint8), v.affine, mask_path, dtype=np.uint8)
    return out


def to_model_layout(data: np.ndarray) -> np.ndarray:
    """``(x, y, z)`` array -> ``(1, z, y, x)`` float32 so depth is the axial axis."""
    return np.ascontiguousarray(np.transpose(data, (2, 1, 0))[None], dtype=np.float32)

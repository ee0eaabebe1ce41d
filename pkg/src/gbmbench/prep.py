"""Volume standardisation: resample -> skull strip -> rigid register -> z-score."""

from __future__ import annotations

import enum
import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.morphology import ball

from .errors import EmptyMask, PluginFailure, UserError, ZeroVariance
from .volume import Volume, load_nifti, save_nifti

log = logging.getLogger(__name__)


class Interpolation(str, enum.Enum):
    TRILINEAR = "trilinear"
    NEAREST = "nearest"


class RegistrationBackend(str, enum.Enum):
    IDENTITY = "identity"
    PLUGIN = "plugin"


@dataclass(frozen=True)
class PrepConfig:
    target_dims: tuple[int, int, int] = (128, 128, 128)
    interpolation: Interpolation = Interpolation.TRILINEAR
    registration_backend: RegistrationBackend = RegistrationBackend.IDENTITY
    atlas_path: str | None = None
    # command template with {moving} {fixed} {out_transform} placeholders
    plugin_command: str | None = None
    closing_radius: int = 2

    def __post_init__(self):
        dims = tuple(int(d) for d in self.target_dims)
        if len(dims) != 3 or len(set(dims)) != 1 or dims[0] < 8:
            raise UserError(f"target_dims must be cubic and >= 8 per axis, got {self.target_dims}")
        object.__setattr__(self, "target_dims", dims)
        object.__setattr__(self, "interpolation", Interpolation(self.interpolation))
        object.__setattr__(self, "registration_backend", RegistrationBackend(self.registration_backend))


def _resample_array(arr: np.ndarray, target: tuple[int, int, int], order: int) -> np.ndarray:
    if arr.shape == tuple(target):
        return arr.copy()
    zoom = [t / s for t, s in zip(target, arr.shape)]
    # grid_mode=False maps first/last voxel centres onto first/last centres
    out = ndimage.zoom(arr, zoom, order=order, mode="nearest", grid_mode=False, prefilter=False)
    assert out.shape == tuple(target), (out.shape, target)
    return out


def resample(v: Volume, cfg: PrepConfig = PrepConfig()) -> Volume:
    """Resample to ``cfg.target_dims`` keeping the corner voxel centres fixed.

    Spacing becomes ``spacing * (n_in - 1) / (n_out - 1)`` per axis, so the
    centre-to-centre field of view is unchanged. Image data uses ``cfg``'s
    interpolation, masks always nearest neighbour.
    """
    target = cfg.target_dims
    if v.shape == target:
        return v.with_(data=v.data.copy(), mask=None if v.mask is None else v.mask.copy())
    order = 1 if cfg.interpolation == Interpolation.TRILINEAR else 0
    data = _resample_array(np.asarray(v.data, dtype=np.float64), target, order)
    mask = None
    if v.mask is not None:
        mask = _resample_array(v.mask.astype(np.uint8), target, 0).astype(bool)
    scale = np.array([(s - 1) / (t - 1) if t > 1 else 1.0 for s, t in zip(v.shape, target)])
    affine = v.affine.copy()
    affine[:3, :3] = v.affine[:3, :3] * scale[None, :]
    return Volume(data=data, affine=affine, mask=mask)


def skull_strip(v: Volume, closing_radius: int = 2) -> Volume:
    """Built-in brain extraction.

    Otsu foreground, largest 3D connected component, binary closing with a
    ball, then interior holes filled.
    """
    data = np.asarray(v.data, dtype=np.float64)
    if not np.isfinite(data).all() or data.max() == data.min():
        raise EmptyMask("cannot separate foreground from a constant volume")
    fg = data > threshold_otsu(data)
    labels, n = ndimage.label(fg)
    if n == 0:
        raise EmptyMask("Otsu threshold left no foreground")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    mask = labels == int(np.argmax(sizes))
    if closing_radius > 0:
        r = closing_radius
        padded = np.pad(mask, r)
        padded = ndimage.binary_closing(padded, structure=ball(r))
        mask = padded[r:-r, r:-r, r:-r]
    mask = ndimage.binary_fill_holes(mask)
    frac = mask.mean()
    if not 0.05 <= frac <= 0.70:
        log.warning("skull_strip: mask covers %.1f%% of the grid", 100 * frac)
    return v.with_(mask=mask)


def read_transform(path: str | Path) -> np.ndarray:
    """Parse a 3x4 row-major rigid transform (12 reals) into a 4x4 matrix."""
    try:
        vals = [float(t) for t in Path(path).read_text().split()]
    except (OSError, ValueError) as exc:
        raise PluginFailure(f"unparseable transform file {path}: {exc}") from exc
    if len(vals) != 12 or not np.isfinite(vals).all():
        raise PluginFailure(f"transform file {path} must hold 12 finite reals, got {len(vals)}")
    m = np.eye(4)
    m[:3, :] = np.reshape(vals, (3, 4))
    rot = m[:3, :3]
    if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-4) or np.linalg.det(rot) <= 0:
        raise PluginFailure(f"transform in {path} is not a proper rigid rotation")
    return m


def apply_rigid(moving: Volume, fixed: Volume, world_transform: np.ndarray) -> Volume:
    """Resample ``moving`` onto ``fixed``'s grid.

    ``world_transform`` maps moving-space world coordinates (mm) to fixed
    space. Voxels falling outside the moving grid are set to 0.
    """
    # fixed voxel -> fixed world -> moving world -> moving voxel
    vox = np.linalg.inv(moving.affine) @ np.linalg.inv(world_transform) @ fixed.affine
    data = ndimage.affine_transform(
        np.asarray(moving.data, dtype=np.float64), vox[:3, :3], offset=vox[:3, 3],
        output_shape=fixed.shape, order=1, mode="constant", cval=0.0,
    )
    mask = None
    if moving.mask is not None:
        mask = ndimage.affine_transform(
            moving.mask.astype(np.uint8), vox[:3, :3], offset=vox[:3, 3],
            output_shape=fixed.shape, order=0, mode="constant", cval=0,
        ).astype(bool)
    return Volume(data=data, affine=fixed.affine.copy(), mask=mask)


def run_plugin(command: str, moving: Volume, fixed: Volume, workdir: str | Path | None = None) -> np.ndarray:
    """Invoke an external registration tool and return its world transform."""
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        tmp = Path(tmp)
        mpath = save_nifti(moving.data, moving.affine, tmp / "moving.nii.gz")
        fpath = save_nifti(fixed.data, fixed.affine, tmp / "fixed.nii.gz")
        tpath = tmp / "transform.txt"
        argv = [a.format(moving=mpath, fixed=fpath, out_transform=tpath) for a in shlex.split(command)]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=3600)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise PluginFailure(f"registration plugin could not run: {exc}") from exc
        if proc.returncode != 0:
            raise PluginFailure(f"registration plugin exited {proc.returncode}: {proc.stderr.strip()[:500]}")
        if not tpath.exists():
            raise PluginFailure("registration plugin wrote no transform file")
        return read_transform(tpath)


def register_rigid(
    v: Volume,
    atlas: Volume | None,
    cfg: PrepConfig = PrepConfig(),
    plugin: Callable[[Volume, Volume], np.ndarray] | None = None,
) -> Volume:
    """Rigidly align ``v`` to ``atlas``.

    The IDENTITY backend returns ``v`` untouched. The PLUGIN backend obtains a
    transform from ``plugin`` (a callable, mostly for tests) or from
    ``cfg.plugin_command`` and resamples through it.
    """
    if cfg.registration_backend == RegistrationBackend.IDENTITY:
        return v
    if atlas is None:
        raise UserError("PLUGIN registration needs an atlas volume")
    if plugin is not None:
        transform = plugin(v, atlas)
    elif cfg.plugin_command:
        transform = run_plugin(cfg.plugin_command, v, atlas)
    else:
        raise UserError("PLUGIN registration needs plugin_command")
    return apply_rigid(v, atlas, transform)


def znormalize(v: Volume) -> Volume:
    """Z-score with in-mask mean and population SD; exterior set to 0."""
    if v.mask is None or not v.mask.any():
        raise EmptyMask("znormalize needs a nonempty brain mask")
    data = np.asarray(v.data, dtype=np.float64)
    inside = data[v.mask]
    mu = inside.mean()
    sd = inside.std()
    if not np.isfinite(sd) or sd <= 1e-12 * max(1.0, abs(mu)):
        raise ZeroVariance("volume is constant inside the brain mask")
    z = (data - mu) / sd
    z[~v.mask] = 0.0
    return v.with_(data=z)


def load_atlas(cfg: PrepConfig) -> Volume | None:
    if cfg.atlas_path is None:
        return None
    return resample(load_nifti(cfg.atlas_path), cfg)


def preprocess(v: Volume, cfg: PrepConfig = PrepConfig(), atlas: Volume | None = None, plugin=None) -> Volume:
    """Full chain in fixed order: resample, skull_strip, register_rigid, znormalize."""
    out = resample(v, cfg)
    out = skull_strip(out, cfg.closing_radius)
    out = register_rigid(out, atlas, cfg, plugin=plugin)
    return znormalize(out)

"""Geometry quality control and per-timepoint series selection."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.filters import threshold_otsu

from .cohort import CohortManifest, SeriesMeta
from .errors import IOFailure
from .volume import Volume, load_nifti

log = logging.getLogger(__name__)

QC_LOG_HEADER = [
    "patient_id", "timepoint", "series_id", "spacing_x", "spacing_y", "spacing_z",
    "slice_thickness", "anisotropy_ratio", "n_slices", "geometry_pass",
    "reject_reasons", "clarity_score", "selected",
]


@dataclass(frozen=True)
class GeometryThresholds:
    max_inplane_spacing: float = 2.0
    max_slice_thickness: float = 6.5
    max_anisotropy_ratio: float = 6.0
    min_slices: int = 20

    def __post_init__(self):
        if min(self.max_inplane_spacing, self.max_slice_thickness, self.max_anisotropy_ratio, self.min_slices) <= 0:
            raise ValueError("geometry thresholds must be strictly positive")
        if self.max_anisotropy_ratio < 1:
            raise ValueError("max_anisotropy_ratio must be >= 1")


@dataclass(frozen=True)
class QCVerdict:
    series: SeriesMeta
    geometry_pass: bool
    reject_reasons: tuple[str, ...] = ()
    clarity_score: float | None = None
    selected: bool = False

    def __post_init__(self):
        if self.selected and not self.geometry_pass:
            raise ValueError("cannot select a series that failed geometry QC")
        if bool(self.reject_reasons) == self.geometry_pass:
            raise ValueError("reject_reasons must be nonempty exactly when geometry fails")

    @property
    def anisotropy_ratio(self) -> float:
        return anisotropy(self.series.voxel_spacing)


def anisotropy(spacing: Sequence[float]) -> float:
    return max(spacing) / min(spacing)


def check_geometry(meta: SeriesMeta, thresholds: GeometryThresholds = GeometryThresholds()) -> QCVerdict:
    reasons = []
    inplane = max(meta.voxel_spacing[0], meta.voxel_spacing[1])
    if inplane > thresholds.max_inplane_spacing:
        reasons.append(f"inplane_spacing {inplane:.3f} mm > {thresholds.max_inplane_spacing:.3f} mm")
    if meta.slice_thickness > thresholds.max_slice_thickness:
        reasons.append(f"slice_thickness {meta.slice_thickness:.3f} mm > {thresholds.max_slice_thickness:.3f} mm")
    ratio = anisotropy(meta.voxel_spacing)
    if ratio > thresholds.max_anisotropy_ratio:
        reasons.append(f"anisotropy {ratio:.3f} > {thresholds.max_anisotropy_ratio:.3f}")
    n_slices = meta.dims[2]
    if n_slices < thresholds.min_slices:
        reasons.append(f"min_slices {n_slices} < {thresholds.min_slices}")
    return QCVerdict(series=meta, geometry_pass=not reasons, reject_reasons=tuple(reasons))


def clarity_score(volume: Volume | np.ndarray) -> float:
    """Relative gradient energy over the head.

    Mean gradient magnitude over the Otsu foreground (dilated by two voxels so
    edges are inside it), divided by the mean absolute intensity over the same
    region. Dividing by a mean rather than an SD keeps the score invariant to
    intensity scaling without letting a blur raise it. Constant volumes score 0.
    """
    data = np.asarray(volume.data if isinstance(volume, Volume) else volume, dtype=np.float64)
    if not np.isfinite(data).all() or data.max() == data.min():
        log.warning("clarity_score: constant or non-finite volume, scoring 0")
        return 0.0
    fg = ndimage.binary_dilation(data > threshold_otsu(data), iterations=2)
    scale = np.abs(data[fg]).mean()
    if scale == 0:
        return 0.0
    grads = np.gradient(data)
    mag = np.sqrt(sum(g * g for g in grads))
    return float(mag[fg].mean() / scale)


def select_best_series(candidates: Sequence[QCVerdict]) -> tuple[QCVerdict | None, list[QCVerdict]]:
    """Mark the highest-clarity passing candidate as selected.

    Ties go to the lexicographically smallest series id. Returns the selected
    verdict (``None`` if nothing passed) and all verdicts sorted by series id.
    """
    if not candidates:
        return None, []
    keys = {(c.series.patient_id, c.series.timepoint) for c in candidates}
    if len(keys) != 1:
        raise ValueError("candidates must share (patient_id, timepoint)")
    ordered = sorted(candidates, key=lambda c: c.series.series_id)
    passing = [c for c in ordered if c.geometry_pass]
    if not passing:
        return None, [replace(c, selected=False) for c in ordered]
    best = min(passing, key=lambda c: (-(c.clarity_score or 0.0), c.series.series_id))
    rows = [replace(c, selected=c is best) for c in ordered]
    chosen = next(r for r in rows if r.selected)
    return chosen, rows


def _to_uint8(plane: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        return np.full(plane.shape, 128, dtype=np.uint8)
    return np.clip((plane - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)


def mid_planes(data: np.ndarray) -> list[np.ndarray]:
    """Axial, coronal and sagittal centre slices, oriented for display."""
    nx, ny, nz = data.shape
    axial = data[:, :, nz // 2].T[::-1]
    coronal = data[:, ny // 2, :].T[::-1]
    sagittal = data[nx // 2, :, :].T[::-1]
    return [axial, coronal, sagittal]


def emit_preview(volume: Volume | np.ndarray, out: str | Path) -> Path:
    """Write a one-row PNG montage of the three mid-planes."""
    data = np.asarray(volume.data if isinstance(volume, Volume) else volume, dtype=np.float64)
    planes = mid_planes(data)
    lo, hi = np.percentile(data, [0.5, 99.5]) if data.size else (0.0, 0.0)
    height = max(p.shape[0] for p in planes)
    panels = []
    for p in planes:
        img = _to_uint8(p, lo, hi)
        pad = np.zeros((height - img.shape[0], img.shape[1]), dtype=np.uint8)
        panels.append(np.vstack([img, pad]))
    montage = np.hstack(panels)
    out = Path(out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(montage, mode="L").save(out)
    except OSError as exc:
        raise IOFailure(f"cannot write preview {out}: {exc}") from exc
    return out


@dataclass
class QCResult:
    verdicts: list[QCVerdict]
    selection: dict[tuple[str, int], str | None] = field(default_factory=dict)

    def excluded(self) -> list[tuple[str, int]]:
        return sorted(k for k, v in self.selection.items() if v is None)


def run_qc(
    manifest: CohortManifest,
    thresholds: GeometryThresholds = GeometryThresholds(),
    preview_dir: str | Path | None = None,
    timepoints: Iterable[int] | None = None,
) -> QCResult:
    """QC every (patient, timepoint) group in manifest order.

    Geometry is checked from header metadata only; voxels are loaded just
    for candidates that pass, to compute clarity and previews.
    """
    wanted = set(timepoints) if timepoints is not None else None
    groups: dict[tuple[str, int], list[SeriesMeta]] = {}
    for meta in manifest.series:
        if wanted is not None and meta.timepoint not in wanted:
            continue
        groups.setdefault((meta.patient_id, meta.timepoint), []).append(meta)

    verdicts = []
    selection = {}
    for key in sorted(groups):
        scored = []
        for meta in groups[key]:
            v = check_geometry(meta, thresholds)
            if v.geometry_pass:
                vol = load_nifti(manifest.path_of(meta))
                v = replace(v, clarity_score=clarity_score(vol))
                if preview_dir is not None:
                    emit_preview(vol, Path(preview_dir) / f"{meta.patient_id}_{meta.timepoint}_{meta.series_id}.png")
            scored.append(v)
        chosen, rows = select_best_series(scored)
        selection[key] = chosen.series.series_id if chosen else None
        if chosen is None:
            log.warning("patient %s timepoint %d: no series passed QC", *key)
        verdicts.extend(rows)
    return QCResult(verdicts=verdicts, selection=selection)


def write_qc_log(verdicts: Sequence[QCVerdict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(QC_LOG_HEADER)
        for v in verdicts:
            s = v.series
            w.writerow([
                s.patient_id, s.timepoint, s.series_id,
                f"{s.voxel_spacing[0]:.6g}", f"{s.voxel_spacing[1]:.6g}", f"{s.voxel_spacing[2]:.6g}",
                f"{s.slice_thickness:.6g}", f"{v.anisotropy_ratio:.6g}", s.dims[2],
                int(v.geometry_pass), ";".join(v.reject_reasons),
                "" if v.clarity_score is None else f"{v.clarity_score:.10g}",
                int(v.selected),
            ])
    return path


def read_selection(path: str | Path) -> dict[tuple[str, int], str | None]:
    """Recover the ``(patient, timepoint) -> series`` selection from a QC log."""
    selection: dict[tuple[str, int], str | None] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["patient_id"], int(row["timepoint"]))
            selection.setdefault(key, None)
            if row["selected"] == "1":
                selection[key] = row["series_id"]
    return selection

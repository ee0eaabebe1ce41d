"""Cohort ingestion, stage selection and synthetic phantom cohorts.

On-disk layout::

    <root>/visits.csv
    <root>/<patient_id>/<timepoint>/<series_id>.nii.gz
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage

from .errors import EmptyStage, MalformedRow, MissingVisitFile, UserError
from .labels import (
    CLASS_ORDER,
    ConsolidatedLabel,
    Outcome,
    VisitAssessment,
    VisitLabel,
    consolidate,
)
from .volume import read_header, save_nifti

log = logging.getLogger(__name__)

VISITS_FILE = "visits.csv"
VISITS_HEADER = ["patient_id", "timepoint", "days_from_rt", "visit_label"]
NIFTI_SUFFIX = ".nii.gz"


class Stage(enum.IntEnum):
    FIRST_FOLLOWUP = 1
    SECOND_FOLLOWUP = 2

    @property
    def slug(self) -> str:
        return {1: "first", 2: "second"}[self.value]

    @classmethod
    def parse(cls, text: "str | int | Stage") -> "Stage":
        if isinstance(text, Stage):
            return text
        if isinstance(text, int):
            return cls(text)
        key = str(text).strip().lower()
        aliases = {
            "first": cls.FIRST_FOLLOWUP, "1": cls.FIRST_FOLLOWUP, "first_followup": cls.FIRST_FOLLOWUP,
            "second": cls.SECOND_FOLLOWUP, "2": cls.SECOND_FOLLOWUP, "second_followup": cls.SECOND_FOLLOWUP,
        }
        if key not in aliases:
            raise UserError(f"unknown stage {text!r}; use 'first' or 'second'")
        return aliases[key]


@dataclass(frozen=True)
class SeriesMeta:
    patient_id: str
    timepoint: int
    series_id: str
    voxel_spacing: tuple[float, float, float]
    slice_thickness: float
    dims: tuple[int, int, int]
    file_ref: str  # relative to the cohort root

    def __post_init__(self):
        if any(s <= 0 for s in self.voxel_spacing):
            raise ValueError(f"{self.series_id}: voxel spacing must be positive")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"{self.series_id}: dims must be >= 1")

    @property
    def key(self) -> tuple[str, int, str]:
        return (self.patient_id, self.timepoint, self.series_id)

    @classmethod
    def from_dict(cls, d: dict) -> "SeriesMeta":
        return cls(
            patient_id=d["patient_id"],
            timepoint=int(d["timepoint"]),
            series_id=d["series_id"],
            voxel_spacing=tuple(float(x) for x in d["voxel_spacing"]),
            slice_thickness=float(d["slice_thickness"]),
            dims=tuple(int(x) for x in d["dims"]),
            file_ref=d["file_ref"],
        )


def _visit_to_dict(v: VisitAssessment) -> dict:
    return {
        "patient_id": v.patient_id,
        "timepoint": v.timepoint,
        "days_from_rt": v.days_from_rt,
        "visit_label": v.visit_label.value,
    }


@dataclass
class CohortManifest:
    series: list[SeriesMeta]
    visits: list[VisitAssessment]
    created_from: str
    content_hash: str = ""
    orphans: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.series = sorted(self.series, key=lambda s: s.key)
        self.visits = sorted(self.visits, key=lambda v: (v.patient_id, v.timepoint))
        keys = [s.key for s in self.series]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (patient_id, timepoint, series_id) in manifest")
        if not self.content_hash:
            self.content_hash = self.compute_hash()

    def canonical_payload(self) -> str:
        payload = {
            "series": [asdict(s) for s in self.series],
            "visits": [_visit_to_dict(v) for v in self.visits],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def compute_hash(self) -> str:
        return hashlib.sha256(self.canonical_payload().encode()).hexdigest()

    @property
    def patients(self) -> list[str]:
        return sorted({s.patient_id for s in self.series} | {v.patient_id for v in self.visits})

    def visits_for(self, patient_id: str) -> list[VisitAssessment]:
        return [v for v in self.visits if v.patient_id == patient_id]

    def series_at(self, patient_id: str, timepoint: int) -> list[SeriesMeta]:
        return [s for s in self.series if s.patient_id == patient_id and s.timepoint == timepoint]

    def path_of(self, meta: SeriesMeta) -> Path:
        return Path(self.created_from) / meta.file_ref

    def to_json(self) -> str:
        return json.dumps(
            {
                "series": [asdict(s) for s in self.series],
                "visits": [_visit_to_dict(v) for v in self.visits],
                "created_from": self.created_from,
                "content_hash": self.content_hash,
                "orphans": self.orphans,
            },
            indent=1,
            sort_keys=True,
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "CohortManifest":
        d = json.loads(Path(path).read_text())
        m = cls(
            series=[SeriesMeta.from_dict(s) for s in d["series"]],
            visits=[
                VisitAssessment(v["patient_id"], int(v["timepoint"]), int(v["days_from_rt"]), VisitLabel(v["visit_label"]))
                for v in d["visits"]
            ],
            created_from=d["created_from"],
            orphans=list(d.get("orphans", [])),
        )
        if d.get("content_hash") and d["content_hash"] != m.content_hash:
            raise UserError(f"{path}: content_hash does not match manifest entries")
        return m


def read_visits(path: str | Path) -> list[VisitAssessment]:
    path = Path(path)
    if not path.is_file():
        raise MissingVisitFile(f"no visit metadata file at {path}")
    visits = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MalformedRow(path, 1, "missing header")
        if [h.strip() for h in header] != VISITS_HEADER:
            raise MalformedRow(path, 1, f"expected header {','.join(VISITS_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise MalformedRow(path, line_no, f"expected 4 fields, got {len(row)}")
            try:
                visits.append(
                    VisitAssessment(
                        patient_id=row[0].strip(),
                        timepoint=int(row[1]),
                        days_from_rt=int(row[2]),
                        visit_label=VisitLabel.parse(row[3]),
                    )
                )
            except ValueError as exc:
                raise MalformedRow(path, line_no, str(exc)) from exc
    seen = set()
    for v in visits:
        if (v.patient_id, v.timepoint) in seen:
            raise MalformedRow(path, 0, f"duplicate visit {v.patient_id}/{v.timepoint}")
        seen.add((v.patient_id, v.timepoint))
    return visits


def write_visits(visits: list[VisitAssessment], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VISITS_HEADER)
        for v in sorted(visits, key=lambda v: (v.patient_id, v.timepoint)):
            w.writerow([v.patient_id, v.timepoint, v.days_from_rt, v.visit_label.value])
    return path


def scan_cohort(root: str | Path) -> CohortManifest:
    """Build a manifest of every NIfTI series and visit row under ``root``.

    Only headers are read. Series without a matching visit row are kept but
    listed in ``orphans``.
    """
    root = Path(root)
    if not root.is_dir():
        raise UserError(f"cohort root {root} does not exist")
    visits = read_visits(root / VISITS_FILE)
    visit_keys = {(v.patient_id, v.timepoint) for v in visits}

    series = []
    orphans = []
    for f in sorted(root.glob(f"*/*/*{NIFTI_SUFFIX}")):
        patient_id, tp_dir = f.parent.parent.name, f.parent.name
        try:
            timepoint = int(tp_dir)
        except ValueError:
            log.warning("skipping %s: timepoint directory is not an integer", f)
            continue
        dims, zooms = read_header(f)
        meta = SeriesMeta(
            patient_id=patient_id,
            timepoint=timepoint,
            series_id=f.name[: -len(NIFTI_SUFFIX)],
            voxel_spacing=tuple(zooms),
            slice_thickness=float(zooms[2]),
            dims=tuple(dims),
            file_ref=f.relative_to(root).as_posix(),
        )
        series.append(meta)
        if (patient_id, timepoint) not in visit_keys:
            orphans.append(meta.file_ref)
            log.warning("orphan series without visit row: %s", meta.file_ref)
    return CohortManifest(series=series, visits=visits, created_from=str(root), orphans=sorted(orphans))


@dataclass(frozen=True)
class StageSample:
    patient_id: str
    timepoint: int
    series_id: str
    volume_ref: str
    label: Outcome


@dataclass
class StageCohort:
    stage: Stage
    samples: list[StageSample]
    excluded: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        pids = [s.patient_id for s in self.samples]
        if len(set(pids)) != len(pids):
            raise ValueError("stage cohort holds more than one sample per patient")
        if any(s.timepoint != int(self.stage) for s in self.samples):
            raise ValueError("sample timepoint does not match stage")

    @property
    def patient_ids(self) -> list[str]:
        return [s.patient_id for s in self.samples]

    def labels(self) -> dict[str, Outcome]:
        return {s.patient_id: s.label for s in self.samples}

    def class_counts(self) -> dict[Outcome, int]:
        counts = {c: 0 for c in CLASS_ORDER}
        for s in self.samples:
            counts[s.label] += 1
        return counts


def select_stage(
    manifest: CohortManifest,
    stage: Stage | str | int,
    labels: Mapping[str, ConsolidatedLabel | Outcome],
    selection: Mapping[tuple[str, int], str | None] | None = None,
) -> StageCohort:
    """Pick one volume per patient at the stage's timepoint.

    ``selection`` maps ``(patient_id, timepoint)`` to the QC-selected
    series id (``None`` when every candidate failed QC). Without it the
    lexicographically first series is used.
    """
    stage = Stage.parse(stage)
    tp = int(stage)
    samples = []
    excluded = {}
    for pid in manifest.patients:
        candidates = manifest.series_at(pid, tp)
        if not candidates:
            excluded[pid] = f"no series at timepoint {tp}"
            continue
        if selection is not None:
            chosen_id = selection.get((pid, tp))
            if chosen_id is None:
                excluded[pid] = f"no QC-passing series at timepoint {tp}"
                continue
            chosen = next((c for c in candidates if c.series_id == chosen_id), None)
            if chosen is None:
                excluded[pid] = f"selected series {chosen_id} missing from manifest"
                continue
        else:
            chosen = candidates[0]
        if pid not in labels:
            excluded[pid] = "no consolidated label"
            continue
        lab = labels[pid]
        value = lab.value if isinstance(lab, ConsolidatedLabel) else Outcome(lab)
        samples.append(StageSample(pid, tp, chosen.series_id, chosen.file_ref, value))
    for pid, why in excluded.items():
        log.info("stage %s: excluding %s (%s)", stage.slug, pid, why)
    if not samples:
        raise EmptyStage(f"no patient has a usable volume at timepoint {tp}")
    return StageCohort(stage=stage, samples=samples, excluded=excluded)


# ---------------------------------------------------------------------------
# phantom cohorts
# ---------------------------------------------------------------------------

#: class mix of generated phantom cohorts
PHANTOM_CLASS_RATIOS = {
    Outcome.PROGRESSION: 0.5,
    Outcome.PSEUDOPROGRESSION: 0.3,
    Outcome.STABLE: 0.2,
}
PHANTOM_TIMEPOINTS = (1, 2, 3)
PHANTOM_SERIES = ("t1c_a", "t1c_b")


def allocate_counts(n: int, ratios: Mapping[Outcome, float] = PHANTOM_CLASS_RATIOS) -> dict[Outcome, int]:
    """Largest-remainder apportionment of ``n`` patients to classes."""
    raw = {c: n * r for c, r in ratios.items()}
    counts = {c: int(np.floor(x)) for c, x in raw.items()}
    short = n - sum(counts.values())
    for c in sorted(raw, key=lambda c: (-(raw[c] - counts[c]), c.index))[:short]:
        counts[c] += 1
    return counts


def sample_phantom_labels(n_patients: int, seed: int) -> dict[str, Outcome]:
    """Outcome per phantom patient id, without writing any files."""
    if n_patients < 1:
        raise UserError("n_patients must be >= 1")
    rng = np.random.default_rng(seed)
    counts = allocate_counts(n_patients)
    pool = [c for c in CLASS_ORDER for _ in range(counts[c])]
    order = rng.permutation(len(pool))
    return {f"P{i:03d}": pool[j] for i, j in enumerate(order)}


def _visit_sequence(outcome: Outcome, rng: np.random.Generator) -> list[VisitLabel]:
    n = int(rng.integers(3, 6))
    stable_like = [VisitLabel.STABLE, VisitLabel.RESPONSE]
    if outcome == Outcome.STABLE:
        return [stable_like[int(rng.integers(2))] for _ in range(n)]
    if outcome == Outcome.PSEUDOPROGRESSION:
        k = int(rng.integers(1, n))
        return [VisitLabel.PSEUDOPROGRESSION] * k + [stable_like[int(rng.integers(2))] for _ in range(n - k)]
    seq = [[VisitLabel.PSEUDOPROGRESSION, *stable_like][int(rng.integers(3))] for _ in range(n)]
    pos = int(rng.integers(n))
    seq[pos] = VisitLabel.DISTANT_PROGRESSION if rng.random() < 0.2 else VisitLabel.PROGRESSION
    return seq


def phantom_volume(
    outcome: Outcome,
    timepoint: int,
    rng: np.random.Generator,
    size: int = 64,
    blur_sigma: float = 0.0,
) -> np.ndarray:
    """Synthetic T1C-like volume with a class-dependent lesion.

    Head = skull shell around a textured brain ellipsoid. PROGRESSION gets a
    solid enhancing blob that grows with timepoint, PSEUDOPROGRESSION a thin
    enhancing rim around a dark core that shrinks, STABLE no lesion.
    """
    g = (np.arange(size) - (size - 1) / 2) / (size / 2)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    r_head = np.sqrt((x / 0.95) ** 2 + (y / 1.0) ** 2 + (z / 0.9) ** 2)
    vol = np.zeros((size,) * 3, dtype=np.float64)
    vol[(r_head > 0.84) & (r_head < 0.90)] = 350.0
    brain = r_head < 0.68
    texture = ndimage.gaussian_filter(rng.standard_normal(vol.shape), 2.0)
    texture /= texture.std() + 1e-12
    vol[brain] = 300.0 + 25.0 * texture[brain]

    centre = rng.uniform(-0.12, 0.12, size=3)
    d = np.sqrt((x - centre[0]) ** 2 + (y - centre[1]) ** 2 + (z - centre[2]) ** 2) * (size / 2)
    if outcome == Outcome.PROGRESSION:
        radius = 8.0 + 2.0 * timepoint
        vol[d < radius] = 800.0
    elif outcome == Outcome.PSEUDOPROGRESSION:
        radius = 14.0 - 1.0 * timepoint
        vol[d < radius] = 120.0
        vol[(d >= radius - 3.0) & (d < radius)] = 800.0

    vol += rng.normal(0.0, 8.0, size=vol.shape)
    if blur_sigma > 0:
        vol = ndimage.gaussian_filter(vol, blur_sigma)
    return np.clip(vol, 0, None)


def generate_phantom_cohort(
    n_patients: int,
    seed: int,
    out: str | Path,
    size: int = 64,
    spacing: float = 2.0,
    n_missing_second: int = 0,
    bad_geometry_fraction: float = 0.1,
) -> CohortManifest:
    """Write a seeded synthetic cohort and return its manifest.

    Each patient gets follow-up timepoints 1-3 with two candidate series:
    ``t1c_a`` (sharp) and ``t1c_b`` (blurred). For roughly
    ``bad_geometry_fraction`` of patients the sharp series carries a thick-slice
    header so QC must fall back to the blurred one. The last
    ``n_missing_second`` patients have no timepoint-2 images.
    """
    if n_patients < 1:
        raise UserError("n_patients must be >= 1")
    if not 0 <= n_missing_second <= n_patients:
        raise UserError("n_missing_second must lie in [0, n_patients]")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    outcomes = sample_phantom_labels(n_patients, seed)
    rng = np.random.default_rng([seed, 1])

    visits = []
    for pid, outcome in outcomes.items():
        seq = _visit_sequence(outcome, rng)
        days = np.cumsum(rng.integers(21, 90, size=len(seq)))
        rows = [VisitAssessment(pid, i + 1, int(days[i]), lab) for i, lab in enumerate(seq)]
        assert consolidate(rows).value == outcome, (pid, seq)
        visits.extend(rows)
    write_visits(visits, out / VISITS_FILE)

    pids = sorted(outcomes)
    missing_second = set(pids[n_patients - n_missing_second:])
    for i, pid in enumerate(pids):
        prng = np.random.default_rng([seed, 2, i])
        bad_geometry = prng.random() < bad_geometry_fraction
        for tp in PHANTOM_TIMEPOINTS:
            if tp == 2 and pid in missing_second:
                continue
            vrng = np.random.default_rng([seed, 3, i, tp])
            sharp = phantom_volume(outcomes[pid], tp, vrng, size=size)
            blurred = ndimage.gaussian_filter(sharp, 1.5)
            base = np.diag([spacing, spacing, spacing, 1.0])
            base[:3, 3] = -spacing * (size - 1) / 2
            for sid, data in zip(PHANTOM_SERIES, (sharp, blurred)):
                affine = base.copy()
                if sid == "t1c_a" and bad_geometry:
                    affine[2, 2] = 7.0
                save_nifti(np.round(data), affine, out / pid / str(tp) / f"{sid}{NIFTI_SUFFIX}", dtype=np.int16)
    log.info("phantom cohort: %d patients written to %s", n_patients, out)
    return scan_cohort(out)

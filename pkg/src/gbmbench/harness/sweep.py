"""Resumable cross-validation sweep over (stage, model, batch size, seed, fold).

Every unit writes one JSON record under
``results/<stage>/<model>/batch<k>/seed<s>/fold<f>.json`` and is then added
to ``sweep_state.json``; both writes are atomic. Rerunning a sweep skips
units already listed, so an interrupted sweep resumes where it stopped.
"""

from __future__ import annotations

import json
import logging
import os
import statistics
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ..balance import AugmentConfig, SamplePlan
from ..errors import GBMBenchError, UserError
from ..zoo import ModelSpec, batch_grid, build
from .folds import FoldAssignment
from .profile import profile
from .train import TrainConfig, TrainingSample, evaluate, train_one

log = logging.getLogger(__name__)

STATE_FILE = "sweep_state.json"


def atomic_write_json(path: str | Path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


@dataclass(frozen=True, order=True)
class UnitKey:
    stage: str
    model: str
    batch_size: int
    seed: int
    fold: int

    @property
    def id(self) -> str:
        return f"{self.stage}/{self.model}/batch{self.batch_size}/seed{self.seed}/fold{self.fold}"

    def record_path(self, results_dir: str | Path) -> Path:
        return Path(results_dir) / self.stage / self.model / f"batch{self.batch_size}" / f"seed{self.seed}" / f"fold{self.fold}.json"


def grid_rows(specs: Sequence[ModelSpec], batch_sizes: Sequence[int] | None = None) -> list[tuple[ModelSpec, int]]:
    """(model, batch size) rows, in catalog order then ascending batch."""
    rows = []
    for spec in specs:
        for b in (batch_sizes or batch_grid(spec)):
            rows.append((spec, int(b)))
    return rows


def sweep_plan(
    stages: Sequence[str],
    specs: Sequence[ModelSpec],
    seeds: Sequence[int],
    k: int,
    batch_sizes: Sequence[int] | None = None,
) -> list[UnitKey]:
    units = []
    for stage in stages:
        for spec, b in grid_rows(specs, batch_sizes):
            for s in seeds:
                for f in range(k):
                    units.append(UnitKey(stage, spec.key, b, int(s), f))
    return units


@dataclass
class SweepState:
    path: Path
    completed: list[str] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)

    @classmethod
    def load(cls, path: str | Path) -> "SweepState":
        path = Path(path)
        if not path.exists():
            return cls(path)
        d = json.loads(path.read_text())
        return cls(path, list(d.get("completed", [])), list(d.get("failed", [])))

    def done(self, key: UnitKey) -> bool:
        return key.id in self.completed or key.id in self.failed

    def mark(self, key: UnitKey, ok: bool) -> None:
        self.completed = [u for u in self.completed if u != key.id]
        self.failed = [u for u in self.failed if u != key.id]
        (self.completed if ok else self.failed).append(key.id)
        atomic_write_json(self.path, {"completed": self.completed, "failed": self.failed})


@dataclass
class StageData:
    """Everything a sweep needs for one stage: volumes, labels and folds."""

    stage: str
    arrays: dict[str, np.ndarray]
    labels: dict[str, int]
    folds: FoldAssignment


@dataclass
class BalancedSplit:
    samples: list[TrainingSample]
    plan: SamplePlan | None
    plan_path: str | None = None


# balancer(stage_data, fold, seed) -> BalancedSplit
Balancer = Callable[[StageData, int, int], BalancedSplit]


def real_training_split(data: StageData, fold: int, seed: int) -> BalancedSplit:
    """No oversampling: the fold's real training samples only."""
    samples = [
        TrainingSample(p, data.arrays[p], data.labels[p], (p,))
        for p in data.folds.train_patients(fold) if p in data.arrays
    ]
    return BalancedSplit(samples=samples, plan=None)


@dataclass
class SweepConfig:
    epochs: int = 10
    learning_rate: float = 1e-4
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    timing_batches: int = 20
    max_units: int | None = None
    save_predictions: bool = True


@dataclass
class SweepReport:
    executed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)
    interrupted: bool = False


def _complexity_path(results_dir: Path, stage: str, model: str, batch: int) -> Path:
    return results_dir / stage / model / f"batch{batch}" / "complexity.json"


def run_unit(
    key: UnitKey,
    spec: ModelSpec,
    data: StageData,
    split: BalancedSplit,
    cfg: SweepConfig,
) -> dict:
    """Train and evaluate one (model, batch, seed, fold) cell; returns its record."""
    train_cfg = TrainConfig(learning_rate=cfg.learning_rate, epochs=cfg.epochs, batch_size=key.batch_size, seed=key.seed)
    train_patients = data.folds.train_patients(key.fold)
    val_patients = [p for p in data.folds.val_patients(key.fold) if p in data.arrays]
    val = [TrainingSample(p, data.arrays[p], data.labels[p], (p,)) for p in val_patients]
    record = {
        "unit": key.id,
        "stage": key.stage,
        "model": key.model,
        "family": spec.family.value,
        "label": spec.label,
        "spec": spec.to_dict(),
        "batch_size": key.batch_size,
        "seed": key.seed,
        "fold": key.fold,
        "train_config": train_cfg.to_dict(),
        "train_patients": train_patients,
        "val_patients": val_patients,
        "plan_file": split.plan_path,
        "n_train_real": sum(not s.synthetic for s in split.samples),
        "n_train_synthetic": sum(s.synthetic for s in split.samples),
        "training_sources": sorted({p for s in split.samples for p in s.sources}),
    }
    model = build(spec, seed=key.seed)
    outcome = train_one(model, split.samples, train_cfg, train_patients, plan=split.plan,
                        augment_cfg=cfg.augment, fold=key.fold)
    ev = evaluate(model, val)
    record.update({
        "status": "ok",
        "losses": outcome.losses,
        "final_loss": outcome.final_loss,
        "train_seconds": outcome.seconds,
        "nondeterministic_ops": outcome.nondeterministic_ops,
        "metrics": ev.metrics.to_dict(),
    })
    if cfg.save_predictions:
        record["predictions"] = [
            {"sample_id": sid, "y_true": int(y), "proba": [float(v) for v in pr]}
            for sid, y, pr in zip(ev.sample_ids, ev.y_true, ev.proba)
        ]
    return record


def run_experiment(
    stage_data: dict[str, StageData],
    specs: Sequence[ModelSpec],
    seeds: Sequence[int],
    results_dir: str | Path,
    cfg: SweepConfig = SweepConfig(),
    balancer: Balancer = real_training_split,
    batch_sizes: Sequence[int] | None = None,
    state_path: str | Path | None = None,
) -> SweepReport:
    """Run every pending unit; failures are recorded and the sweep continues."""
    results_dir = Path(results_dir)
    state = SweepState.load(state_path or results_dir.parent / STATE_FILE)
    ks = {d.folds.k for d in stage_data.values()}
    if len(ks) != 1:
        raise UserError("all stages must use the same number of folds")
    plan = sweep_plan(list(stage_data), specs, seeds, ks.pop(), batch_sizes)
    spec_by_key = {s.key: s for s in specs}
    report = SweepReport()
    cache: dict[tuple[str, int, int], BalancedSplit] = {}

    for key in plan:
        if state.done(key):
            report.skipped.append(key.id)
            continue
        if cfg.max_units is not None and len(report.executed) + len(report.failed) >= cfg.max_units:
            report.interrupted = True
            break
        spec = spec_by_key[key.model]
        data = stage_data[key.stage]
        t0 = time.perf_counter()
        try:
            ck = (key.stage, key.fold, key.seed)
            if ck not in cache:
                cache.clear()  # keep one fold's balanced volumes in memory at a time
                cache[ck] = balancer(data, key.fold, key.seed)
            record = run_unit(key, spec, data, cache[ck], cfg)
            ok = True
        except GBMBenchError as exc:
            log.error("unit %s failed: %s", key.id, exc)
            record = {"unit": key.id, "stage": key.stage, "model": key.model, "family": spec.family.value,
                      "label": spec.label, "batch_size": key.batch_size, "seed": key.seed, "fold": key.fold,
                      "status": "failed", "error": f"{type(exc).__name__}: {exc}",
                      "traceback": traceback.format_exc(limit=5)}
            ok = False
        atomic_write_json(key.record_path(results_dir), record)
        state.mark(key, ok)
        (report.executed if ok else report.failed).append(key.id)
        log.info("unit %s %s in %.1fs", key.id, "done" if ok else "FAILED", time.perf_counter() - t0)

        cpath = _complexity_path(results_dir, key.stage, key.model, key.batch_size)
        if ok and not cpath.exists():
            model = build(spec, seed=key.seed)
            rec = profile(model, spec.input_shape, key.batch_size, n_timed=cfg.timing_batches)
            atomic_write_json(cpath, {"model": key.model, "stage": key.stage, **rec.to_dict()})
    return report


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

METRICS = ("accuracy", "macro_f1", "macro_auc")


def load_records(results_dir: str | Path) -> list[dict]:
    results_dir = Path(results_dir)
    if not results_dir.exists():
        return []
    return [json.loads(p.read_text()) for p in sorted(results_dir.rglob("fold*.json"))]


def _mean_sd(values: Sequence[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    return statistics.fmean(values), statistics.pstdev(values)


@dataclass
class ExperimentResult:
    stage: str
    model: str
    family: str
    label: str
    batch_size: int
    # metric -> seed -> fold -> value (None when undefined)
    per_seed_fold: dict[str, dict[int, dict[int, float | None]]]
    # metric -> seed -> mean over folds
    per_seed: dict[str, dict[int, float | None]]
    # metric -> (mean, population sd) across seed means
    aggregate: dict[str, tuple[float | None, float | None]]
    # metric -> (mean, population sd) across all seed x fold values
    pooled: dict[str, tuple[float | None, float | None]]
    runtime_minutes: tuple[float | None, float | None]
    n_units: int
    n_failed: int
    complexity: dict | None = None

    def to_dict(self) -> dict:
        return {
            "stage": self.stage, "model": self.model, "family": self.family, "label": self.label,
            "batch_size": self.batch_size,
            "per_seed_fold": {m: {str(s): {str(f): v for f, v in fv.items()} for s, fv in sv.items()}
                              for m, sv in self.per_seed_fold.items()},
            "per_seed": {m: {str(s): v for s, v in sv.items()} for m, sv in self.per_seed.items()},
            "aggregate": {m: list(v) for m, v in self.aggregate.items()},
            "pooled": {m: list(v) for m, v in self.pooled.items()},
            "runtime_minutes": list(self.runtime_minutes),
            "n_units": self.n_units, "n_failed": self.n_failed, "complexity": self.complexity,
        }


def aggregate(records: Iterable[dict], results_dir: str | Path | None = None) -> list[ExperimentResult]:
    """Group unit records into per-(stage, model, batch) results.

    Per seed, each metric is averaged over the folds where it is defined; the
    reported SD is the population SD of those seed means. Runtime is the
    per-seed sum of fold training times, in minutes.
    """
    groups: dict[tuple[str, str, int], list[dict]] = {}
    for r in records:
        groups.setdefault((r["stage"], r["model"], int(r["batch_size"])), []).append(r)
    out = []
    for (stage, model, batch), recs in sorted(groups.items()):
        ok = [r for r in recs if r.get("status") == "ok"]
        per_seed_fold = {m: {} for m in METRICS}
        runtime: dict[int, float] = {}
        for r in ok:
            for m in METRICS:
                per_seed_fold[m].setdefault(int(r["seed"]), {})[int(r["fold"])] = r["metrics"][m]
            runtime[int(r["seed"])] = runtime.get(int(r["seed"]), 0.0) + r["train_seconds"] / 60.0
        per_seed = {}
        agg = {}
        pooled = {}
        for m in METRICS:
            per_seed[m] = {}
            for s, folds in sorted(per_seed_fold[m].items()):
                vals = [v for v in folds.values() if v is not None]
                per_seed[m][s] = statistics.fmean(vals) if vals else None
            agg[m] = _mean_sd([v for v in per_seed[m].values() if v is not None])
            pooled[m] = _mean_sd([v for folds in per_seed_fold[m].values() for v in folds.values() if v is not None])
        complexity = None
        if results_dir is not None:
            cpath = _complexity_path(Path(results_dir), stage, model, batch)
            if cpath.exists():
                complexity = json.loads(cpath.read_text())
        first = recs[0]
        out.append(ExperimentResult(
            stage=stage, model=model, family=first["family"], label=first.get("label", model), batch_size=batch,
            per_seed_fold=per_seed_fold, per_seed=per_seed, aggregate=agg, pooled=pooled,
            runtime_minutes=_mean_sd(list(runtime.values())),
            n_units=len(recs), n_failed=len(recs) - len(ok), complexity=complexity,
        ))
    return out

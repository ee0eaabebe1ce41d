"""Patient-level stratified k-fold assignment."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from ..cohort import Stage, StageCohort
from ..errors import TooFewPatients
from ..labels import CLASS_ORDER, Outcome

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FoldAssignment:
    stage: Stage | None
    k: int
    seed: int
    folds: dict[str, int]
    labels: dict[str, Outcome]

    def val_patients(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.folds.items() if f == fold)

    def train_patients(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.folds.items() if f != fold)

    def class_counts(self, fold: int) -> dict[Outcome, int]:
        counts = {c: 0 for c in CLASS_ORDER}
        for p in self.val_patients(fold):
            counts[self.labels[p]] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "stage": None if self.stage is None else self.stage.slug,
            "k": self.k,
            "seed": self.seed,
            "folds": dict(sorted(self.folds.items())),
            "labels": {p: self.labels[p].value for p in sorted(self.labels)},
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "FoldAssignment":
        d = json.loads(Path(path).read_text())
        return cls(
            stage=None if d["stage"] is None else Stage.parse(d["stage"]),
            k=int(d["k"]),
            seed=int(d["seed"]),
            folds={p: int(f) for p, f in d["folds"].items()},
            labels={p: Outcome(v) for p, v in d["labels"].items()},
        )


def make_folds(cohort: StageCohort | Mapping[str, Outcome], k: int = 5, seed: int = 0) -> FoldAssignment:
    """Stratified assignment of patients to ``k`` folds.

    Within each class the patients are shuffled and dealt round-robin. The
    dealing position carries over from one class to the next, so each class
    lands floor/ceil of ``n_c / k`` per fold and fold sizes differ by at most one.
    """
    if isinstance(cohort, StageCohort):
        stage, labels = cohort.stage, cohort.labels()
    else:
        stage, labels = None, dict(cohort)
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(labels) < k:
        raise TooFewPatients(f"{len(labels)} patients cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    folds: dict[str, int] = {}
    cursor = 0
    for cls in CLASS_ORDER:
        members = sorted(p for p, c in labels.items() if c == cls)
        if not members:
            continue
        if len(members) < k:
            log.warning("class %s has %d patients, fewer than %d folds; some folds will lack it",
                        cls.value, len(members), k)
        for p in rng.permutation(members):
            folds[str(p)] = cursor % k
            cursor += 1
    return FoldAssignment(stage=stage, k=k, seed=seed, folds=folds, labels=labels)

"""Per-patient label consolidation.

A patient's follow-up visits each carry a radiology label that may change
over time. :func:`consolidate` maps the ordered visit list to a single
outcome using a fixed rule precedence::

    DISTANT > OVERRIDE > SCARCE > PSP > STABLE_RUN > fallback

RESPONSE counts as STABLE wherever runs of stability are evaluated.
"""

from __future__ import annotations

import csv
import enum
import io
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyVisitList, UnorderedVisits

log = logging.getLogger(__name__)


class VisitLabel(str, enum.Enum):
    PROGRESSION = "progression"
    PSEUDOPROGRESSION = "pseudoprogression"
    STABLE = "stable"
    RESPONSE = "response"
    DISTANT_PROGRESSION = "distant_progression"

    @classmethod
    def parse(cls, text: str) -> "VisitLabel":
        return cls(text.strip().lower())


class Outcome(str, enum.Enum):
    PROGRESSION = "progression"
    PSEUDOPROGRESSION = "pseudoprogression"
    STABLE = "stable"

    @property
    def index(self) -> int:
        return CLASS_ORDER.index(self)


#: class index order used by every model head and metric
CLASS_ORDER = (Outcome.PROGRESSION, Outcome.PSEUDOPROGRESSION, Outcome.STABLE)


class Rule(str, enum.Enum):
    DISTANT = "DISTANT"
    OVERRIDE = "OVERRIDE"
    SCARCE = "SCARCE"
    PSP = "PSP"
    STABLE_RUN = "STABLE_RUN"


@dataclass(frozen=True)
class VisitAssessment:
    patient_id: str
    timepoint: int
    days_from_rt: int
    visit_label: VisitLabel


@dataclass(frozen=True)
class ConsolidatedLabel:
    value: Outcome
    rule_fired: Rule
    evidence: tuple[int, ...] = field(default_factory=tuple)
    fallback: bool = False

    def __post_init__(self):
        if self.rule_fired in (Rule.DISTANT, Rule.OVERRIDE) and self.value != Outcome.PROGRESSION:
            raise ValueError("progression rules must yield PROGRESSION")
        if self.rule_fired == Rule.PSP and self.value != Outcome.PSEUDOPROGRESSION:
            raise ValueError("PSP rule must yield PSEUDOPROGRESSION")
        if self.rule_fired == Rule.STABLE_RUN and not self.fallback and self.value != Outcome.STABLE:
            raise ValueError("STABLE_RUN rule must yield STABLE")


_STABLE_LIKE = (VisitLabel.STABLE, VisitLabel.RESPONSE)


def _check_order(visits: Sequence[VisitAssessment]) -> None:
    for prev, cur in zip(visits, visits[1:]):
        if cur.timepoint <= prev.timepoint:
            raise UnorderedVisits(
                f"patient {cur.patient_id}: timepoint {cur.timepoint} follows {prev.timepoint}"
            )
        if cur.days_from_rt < prev.days_from_rt:
            raise UnorderedVisits(
                f"patient {cur.patient_id}: days_from_rt decreases at timepoint {cur.timepoint}"
            )


def _longest_stable_run(labels: Sequence[VisitLabel]) -> tuple[int, int]:
    """Return ``(start, length)`` of the first longest stable/response run."""
    best = (0, 0)
    start = None
    for i, lab in enumerate(list(labels) + [None]):
        if lab in _STABLE_LIKE:
            if start is None:
                start = i
        elif start is not None:
            if i - start > best[1]:
                best = (start, i - start)
            start = None
    return best


def consolidate(visits: Sequence[VisitAssessment]) -> ConsolidatedLabel:
    """Consolidate a time-ordered visit list into one patient outcome."""
    if not visits:
        raise EmptyVisitList("cannot consolidate an empty visit list")
    visits = list(visits)
    _check_order(visits)
    labels = [v.visit_label for v in visits]
    tps = [v.timepoint for v in visits]

    distant = [t for t, lab in zip(tps, labels) if lab == VisitLabel.DISTANT_PROGRESSION]
    if distant:
        return ConsolidatedLabel(Outcome.PROGRESSION, Rule.DISTANT, tuple(distant))

    progression = [t for t, lab in zip(tps, labels) if lab == VisitLabel.PROGRESSION]
    if progression:
        return ConsolidatedLabel(Outcome.PROGRESSION, Rule.OVERRIDE, tuple(progression))

    if len(visits) <= 2:
        value = (
            Outcome.PSEUDOPROGRESSION
            if labels[-1] == VisitLabel.PSEUDOPROGRESSION
            else Outcome.PROGRESSION
        )
        return ConsolidatedLabel(value, Rule.SCARCE, (tps[-1],))

    if labels[-1] == VisitLabel.PSEUDOPROGRESSION:
        return ConsolidatedLabel(Outcome.PSEUDOPROGRESSION, Rule.PSP, (tps[-1],))
    psp_idx = [i for i, lab in enumerate(labels) if lab == VisitLabel.PSEUDOPROGRESSION]
    for i in psp_idx:
        tail = labels[i + 1:]
        if tail and all(lab in _STABLE_LIKE for lab in tail):
            return ConsolidatedLabel(Outcome.PSEUDOPROGRESSION, Rule.PSP, tuple(tps[i:]))

    start, length = _longest_stable_run(labels)
    if length >= 3:
        return ConsolidatedLabel(Outcome.STABLE, Rule.STABLE_RUN, tuple(tps[start:start + length]))

    # Unreachable for the five-symbol alphabet once the rules above have
    # been checked, kept so the function stays total if labels are added.
    last = labels[-1]
    value = Outcome.STABLE if last in _STABLE_LIKE + (VisitLabel.PSEUDOPROGRESSION,) else Outcome.PROGRESSION
    log.warning("label fallback for patient %s: %s", visits[0].patient_id, [l.value for l in labels])
    return ConsolidatedLabel(value, Rule.STABLE_RUN, (tps[-1],), fallback=True)


def consolidate_labels(labels: Sequence[VisitLabel | str], patient_id: str = "?") -> ConsolidatedLabel:
    """Convenience wrapper: consolidate a bare label sequence (timepoints 1..n)."""
    visits = [
        VisitAssessment(patient_id, i + 1, 30 * (i + 1), VisitLabel(lab))
        for i, lab in enumerate(labels)
    ]
    return consolidate(visits)


def consolidate_cohort(visits: Iterable[VisitAssessment]) -> dict[str, ConsolidatedLabel]:
    by_patient: dict[str, list[VisitAssessment]] = {}
    for v in visits:
        by_patient.setdefault(v.patient_id, []).append(v)
    out = {}
    for pid in sorted(by_patient):
        rows = sorted(by_patient[pid], key=lambda v: v.timepoint)
        out[pid] = consolidate(rows)
    return out


def rule_table(max_len: int) -> list[tuple[tuple[VisitLabel, ...], ConsolidatedLabel]]:
    """Every visit sequence of length 1..max_len with its consolidated label."""
    if not 1 <= max_len <= 6:
        raise ValueError("max_len must be in 1..6")
    rows = []
    alphabet = list(VisitLabel)
    for n in range(1, max_len + 1):
        for seq in itertools.product(alphabet, repeat=n):
            rows.append((seq, consolidate_labels(seq)))
    return rows


def rule_table_csv(max_len: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sequence", "label", "rule_fired", "fallback"])
    for seq, lab in rule_table(max_len):
        w.writerow([";".join(s.value for s in seq), lab.value.value, lab.rule_fired.value, int(lab.fallback)])
    return buf.getvalue()


LABELS_HEADER = ["patient_id", "label", "rule_fired", "evidence_timepoints"]


def write_labels_csv(labels: dict[str, ConsolidatedLabel], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABELS_HEADER)
        for pid in sorted(labels):
            lab = labels[pid]
            rule = lab.rule_fired.value + ("-fallback" if lab.fallback else "")
            w.writerow([pid, lab.value.value, rule, ";".join(str(t) for t in lab.evidence)])
    return path


def read_labels_csv(path: str | Path) -> dict[str, ConsolidatedLabel]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rule = row["rule_fired"]
            fallback = rule.endswith("-fallback")
            ev = tuple(int(t) for t in row["evidence_timepoints"].split(";") if t)
            out[row["patient_id"]] = ConsolidatedLabel(
                Outcome(row["label"]), Rule(rule.removesuffix("-fallback")), ev, fallback
            )
    return out

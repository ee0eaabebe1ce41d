"""Tables, plots and prediction galleries built from stored unit records.

Nothing here computes a number of record: every value is read from the
aggregates of :func:`gbmbench.harness.aggregate`, so rerunning a report on
the same results gives the same files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .errors import NoResults  # noqa: E402
from .harness.sweep import ExperimentResult  # noqa: E402
from .labels import CLASS_ORDER  # noqa: E402
from .zoo import PAPER_COMPLEXITY, paper_catalog  # noqa: E402

log = logging.getLogger(__name__)

MISSING = "—"
PM = "±"
METRIC_COLUMNS = {"accuracy": "Accuracy", "macro_f1": "F1", "macro_auc": "AUC"}
FOOTNOTES = [
    f"{MISSING} metric undefined for every seed (for example AUC with a single-class validation fold).",
    "AUC is one-vs-rest, macro-averaged over classes present in each fold.",
    "mean ± SD: population SD across seed means; each seed mean averages the folds.",
]
_CATALOG_ORDER = {spec.key: i for i, spec in enumerate(paper_catalog())}
_PNG_META = {"Software": None}


def row_order(r: ExperimentResult) -> tuple:
    return (_CATALOG_ORDER.get(r.model, len(_CATALOG_ORDER)), r.model, r.batch_size)


def fmt_pm(mean: float | None, sd: float | None, digits: int = 4) -> str:
    if mean is None:
        return MISSING
    return f"{mean:.{digits}f} {PM} {(sd or 0.0):.{digits}f}"


def parse_cell(text: str) -> tuple[float, float] | None:
    """Inverse of :func:`fmt_pm`."""
    text = text.strip()
    if text == MISSING:
        return None
    m = re.fullmatch(r"(-?[\d.eE+-]+)\s*±\s*(-?[\d.eE+-]+)", text)
    if not m:
        raise ValueError(f"not a mean ± sd cell: {text!r}")
    return float(m.group(1)), float(m.group(2))


def provenance(results: Sequence[ExperimentResult], config_hash: str | None = None,
               seeds: Sequence[int] | None = None) -> dict:
    if seeds is None:
        seeds = sorted({s for r in results for s in r.per_seed["accuracy"]})
    return {
        "config_hash": config_hash or "unknown",
        "seeds": list(seeds),
        "code_version": f"gbmbench {__version__}",
        "unit_records": sum(r.n_units for r in results),
    }


def _provenance_lines(prov: dict) -> list[str]:
    return [f"{k}: {v}" for k, v in prov.items()]


def _write_csv(path: Path, prov: dict, header: list[str], rows: list[list[str]], notes: list[str]) -> Path:
    buf = io.StringIO()
    for line in _provenance_lines(prov):
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    for n in notes:
        buf.write(f"# note: {n}\n")
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def _write_md(path: Path, title: str, prov: dict, header: list[str], rows: list[list[str]], notes: list[str]) -> Path:
    lines = [f"# {title}", ""]
    lines += [f"<!-- {line} -->" for line in _provenance_lines(prov)]
    lines += ["", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    lines += [""] + [f"- {n}" for n in notes]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_csv_table(path: str | Path) -> tuple[list[str], list[list[str]]]:
    """Header and rows of an emitted CSV table, skipping ``#`` lines."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def performance_rows(results: Sequence[ExperimentResult]) -> list[list[str]]:
    return [
        [r.label, str(r.batch_size)] + [fmt_pm(*r.aggregate[m]) for m in METRIC_COLUMNS]
        for r in sorted(results, key=row_order)
    ]


def _gflops(c: dict | None) -> str:
    return MISSING if not c else f"{c['flops_per_sample'] / 1e9:.4f}"


def _mparams(c: dict | None) -> str:
    return MISSING if not c else f"{c['params'] / 1e6:.4f}"


def complexity_rows(results: Sequence[ExperimentResult]) -> list[list[str]]:
    rows = []
    for r in sorted(results, key=row_order):
        c = r.complexity
        bt = MISSING if not c or c.get("batch_time_mean_s") is None else fmt_pm(c["batch_time_mean_s"], c["batch_time_sd_s"])
        rows.append([r.label, str(r.batch_size), _gflops(c), _mparams(c), bt, fmt_pm(*r.runtime_minutes)])
    return rows


PERFORMANCE_HEADER = ["Model", "Batch"] + list(METRIC_COLUMNS.values())
COMPLEXITY_HEADER = ["Model", "Batch", "FLOPs (G)", "Params (M)", "Batch time (s)", "Runtime (min)"]


def emit_tables(
    results: Sequence[ExperimentResult],
    out_dir: str | Path,
    formats: Sequence[str] = ("csv", "md"),
    prov: dict | None = None,
) -> list[Path]:
    """Write ``performance_<stage>`` and ``complexity_<stage>`` tables."""
    if not results:
        raise NoResults("no completed unit runs to report")
    formats = [f.lower() for f in formats]
    for f in formats:
        if f not in ("csv", "md", "markdown"):
            raise ValueError(f"unknown table format {f!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prov = prov or provenance(results)
    written = []
    for stage in sorted({r.stage for r in results}):
        rs = [r for r in results if r.stage == stage]
        tables = [
            (f"performance_{stage}", f"Classification performance, {stage} follow-up", PERFORMANCE_HEADER,
             performance_rows(rs), FOOTNOTES),
            (f"complexity_{stage}", f"Computational complexity, {stage} follow-up", COMPLEXITY_HEADER,
             complexity_rows(rs), [
                 "FLOPs are 2 x multiply-accumulates per sample; Params counts trainable scalars.",
                 "Runtime: total training minutes over all folds of one seed, mean ± SD across seeds.",
                 f"{MISSING} not measured.",
             ]),
        ]
        for name, title, header, rows, notes in tables:
            if "csv" in formats:
                written.append(_write_csv(out_dir / f"{name}.csv", prov, header, rows, notes))
            if "md" in formats or "markdown" in formats:
                written.append(_write_md(out_dir / f"{name}.md", title, prov, header, rows, notes))
    return written


def rel_diff(ours: float, ref: float) -> float:
    return (ours - ref) / ref


def emit_reference_comparison(profiles: dict[str, dict], out_dir: str | Path, prov: dict | None = None) -> list[Path]:
    """Side-by-side PAPER-scale params/FLOPs against the reference values (informational)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["Model", "Params (M)", "Reference params (M)", "Params rel. diff",
              "FLOPs (G)", "Reference FLOPs (G)", "FLOPs rel. diff"]
    rows = []
    for key in sorted(profiles, key=lambda k: _CATALOG_ORDER.get(k, 99)):
        p = profiles[key]
        ref_g, ref_m = PAPER_COMPLEXITY.get(key, (None, None))
        ours_m = p["params"] / 1e6
        ours_g = p["flops_per_sample"] / 1e9
        rows.append([
            p.get("label", key), f"{ours_m:.4f}", MISSING if ref_m is None else f"{ref_m:.4f}",
            MISSING if ref_m is None else f"{rel_diff(ours_m, ref_m):+.2%}",
            f"{ours_g:.4f}", MISSING if ref_g is None else f"{ref_g:.4f}",
            MISSING if ref_g is None else f"{rel_diff(ours_g, ref_g):+.2%}",
        ])
    notes = ["Reference values are informational; layer details behind them are only partly specified."]
    prov = prov or {"code_version": f"gbmbench {__version__}"}
    return [
        _write_csv(out_dir / "reference_complexity.csv", prov, header, rows, notes),
        _write_md(out_dir / "reference_complexity.md", "Full-scale complexity vs published reference", prov, header, rows, notes),
    ]


# --------------------------------------------------------------------------- plots

def _save(fig, png: Path, sidecar: dict) -> Path:
    png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(png, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    png.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return png


def emit_plots(results: Sequence[ExperimentResult], out_dir: str | Path, prov: dict | None = None) -> list[Path]:
    """Grouped metric bars and a FLOPs-vs-AUC scatter per stage, each with a JSON sidecar."""
    if not results:
        raise NoResults("no results to plot")
    out_dir = Path(out_dir)
    prov = prov or provenance(results)
    written = []
    for stage in sorted({r.stage for r in results}):
        rs = sorted((r for r in results if r.stage == stage), key=row_order)
        models = list(dict.fromkeys(r.label for r in rs))
        batches = sorted({r.batch_size for r in rs})

        # (a) grouped bars: one panel per metric, one group per model, one bar per batch size
        fig, axes = plt.subplots(1, 3, figsize=(4 + 1.2 * len(models) * 3, 4), sharey=True)
        sidecar = {"stage": stage, "provenance": prov, "metrics": {}}
        width = 0.8 / max(1, len(batches))
        for ax, (metric, title) in zip(axes, METRIC_COLUMNS.items()):
            groups = []
            for gi, model in enumerate(models):
                bars = []
                for bi, b in enumerate(batches):
                    r = next((x for x in rs if x.label == model and x.batch_size == b), None)
                    if r is None:
                        continue
                    mean, sd = r.aggregate[metric]
                    bars.append({"batch_size": b, "mean": mean, "sd": sd})
                    if mean is not None:
                        ax.bar(gi + (bi - (len(batches) - 1) / 2) * width, mean, width, yerr=sd or 0.0,
                               color=f"C{bi}", label=f"batch {b}" if gi == 0 else None, capsize=2)
                groups.append({"model": model, "bars": bars})
            sidecar["metrics"][metric] = {"title": title, "groups": groups}
            ax.set_title(title)
            ax.set_xticks(range(len(models)))
            ax.set_xticklabels(models, rotation=30, ha="right", fontsize=8)
            ax.set_ylim(0, 1.05)
        axes[0].legend(fontsize=8)
        fig.suptitle(f"{stage} follow-up")
        fig.tight_layout()
        written.append(_save(fig, out_dir / f"metrics_{stage}.png", sidecar))

        # (b) efficiency scatter
        points = []
        for r in rs:
            if not r.complexity or r.aggregate["macro_auc"][0] is None:
                continue
            points.append({"label": f"{r.label} (b={r.batch_size})", "flops": r.complexity["flops_per_sample"],
                           "auc": r.aggregate["macro_auc"][0]})
        fig, ax = plt.subplots(figsize=(6, 4.5))
        for p in points:
            ax.scatter(p["flops"], p["auc"], color="C0")
            ax.annotate(p["label"], (p["flops"], p["auc"]), fontsize=7, xytext=(3, 3), textcoords="offset points")
        if points and max(p["flops"] for p in points) > 0:
            ax.set_xscale("log")
        ax.set_xlabel("FLOPs per sample")
        ax.set_ylabel("macro AUC")
        ax.set_title(f"Efficiency, {stage} follow-up")
        fig.tight_layout()
        written.append(_save(fig, out_dir / f"efficiency_{stage}.png",
                             {"stage": stage, "provenance": prov, "points": points}))
    return written


# --------------------------------------------------------------------------- galleries

def _mid_slice(array: np.ndarray) -> np.ndarray:
    return array[array.shape[0] // 2]


def render_gallery(
    entries: Sequence[dict],
    n_per_class: int,
    out: str | Path,
    title: str = "",
) -> Path:
    """One panel per predicted class holding up to ``n_per_class`` mid-slices.

    ``entries`` items carry ``sample_id``, ``array`` (D, H, W), ``y_true`` and
    ``y_pred`` class indices. A class nobody was assigned to gets an empty
    panel captioned "no predictions".
    """
    out = Path(out)
    n = max(1, n_per_class)
    fig, axes = plt.subplots(len(CLASS_ORDER), n, figsize=(2.2 * n, 2.4 * len(CLASS_ORDER)), squeeze=False)
    sidecar = {"title": title, "n_per_class": n_per_class, "panels": []}
    for ci, cls in enumerate(CLASS_ORDER):
        chosen = sorted((e for e in entries if e["y_pred"] == ci), key=lambda e: e["sample_id"])[:n]
        sidecar["panels"].append({
            "predicted": cls.value,
            "items": [{"sample_id": e["sample_id"], "true": CLASS_ORDER[e["y_true"]].value} for e in chosen],
        })
        for j in range(n):
            ax = axes[ci, j]
            ax.set_xticks([])
            ax.set_yticks([])
            if j < len(chosen):
                e = chosen[j]
                ax.imshow(_mid_slice(np.asarray(e["array"])), cmap="gray")
                ax.set_title(f"{e['sample_id']}\ntrue: {CLASS_ORDER[e['y_true']].value}", fontsize=7)
            elif j == 0:
                ax.text(0.5, 0.5, "no predictions", ha="center", va="center", fontsize=9, transform=ax.transAxes)
            else:
                ax.axis("off")
            if j == 0:
                ax.set_ylabel(f"pred: {cls.value}", fontsize=8)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, out, sidecar)


def emit_gallery(model, samples: Sequence, n_per_class: int, out: str | Path, title: str = "") -> Path:
    """Predict ``samples`` (objects with ``sample_id``, ``array``, ``label``) and render the gallery."""
    from .harness.train import predict_proba

    arrays = [s.array for s in samples]
    pred = predict_proba(model, arrays).argmax(axis=1) if samples else []
    entries = [{"sample_id": s.sample_id, "array": s.array, "y_true": int(s.label), "y_pred": int(p)}
               for s, p in zip(samples, pred)]
    return render_gallery(entries, n_per_class, out, title)

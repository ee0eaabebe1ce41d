"""Acceptance criteria, one test (or group) per criterion.

Each test carries ``@pytest.mark.criterion(n, title)``; the terminal summary
prints one PASS/FAIL line per criterion.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from gbmbench.balance import SamplePlan
from gbmbench.cli import main
from gbmbench.cohort import sample_phantom_labels
from gbmbench.harness.folds import make_folds
from gbmbench.harness.metrics import compute_metrics
from gbmbench.harness.profile import count_macs, count_params, profile
from gbmbench.harness.sweep import load_records, sweep_plan
from gbmbench.labels import CLASS_ORDER, consolidate_labels
from gbmbench.prep import PrepConfig, preprocess
from gbmbench.report import read_csv_table
from gbmbench.volume import Volume
from gbmbench.zoo import SEQUENCE_FAMILIES, Family, build, paper_catalog, paper_spec, toy_scale
from oracles import all_sequences, check_metric_oracles, conv_params, label_oracle, linear_params

E2E_SEED = 42
E2E_FAMILIES = ["CNN_SE", "CNN3D"]


# ------------------------------------------------------------------ 1


@pytest.mark.criterion(1, "label engine matches the straight-line oracle on all 780 sequences in < 5 s")
def test_ac01_label_oracle():
    seqs = list(all_sequences(4))
    assert len(seqs) == 780
    t0 = time.perf_counter()
    mismatches = 0
    for seq in seqs:
        got = consolidate_labels(seq)
        rule = "FALLBACK" if got.fallback else got.rule_fired.value
        mismatches += (got.value.value, rule) != label_oracle(seq)
    seconds = time.perf_counter() - t0
    print(f"780 sequences, {mismatches} mismatches, {seconds:.3f} s")
    assert mismatches == 0
    assert seconds < 5


# ------------------------------------------------------------------ 9, 10, 2 (shared end-to-end runs)


def _write_config(root: Path) -> Path:
    cfg = root / "c.toml"
    cfg.write_text(
        'data_root = "data"\nworkdir = "work"\nstages = ["first"]\n'
        f'families = {json.dumps(E2E_FAMILIES)}\nseed = {E2E_SEED}\n'
    )
    return cfg


def run_end_to_end(root: Path) -> dict:
    """phantom -> scan -> qc -> label -> prep -> split -> balance -> sweep -> report through the CLI."""
    root.mkdir(parents=True, exist_ok=True)
    cfg = _write_config(root)
    t0 = time.perf_counter()
    codes = {"phantom": main(["phantom", "--n", "30", "--seed", str(E2E_SEED), "--out", str(root / "data")])}
    for cmd in ("scan", "qc", "label", "prep", "split", "balance", "sweep", "report"):
        codes[cmd] = main([cmd, "--config", str(cfg)])
        if codes[cmd] != 0:
            break
    return {"root": root, "work": root / "work", "codes": codes, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def e2e(tmp_path_factory):
    return run_end_to_end(tmp_path_factory.mktemp("e2e") / "run1")


@pytest.fixture(scope="session")
def e2e_repeat(tmp_path_factory, e2e):
    return run_end_to_end(tmp_path_factory.mktemp("e2e") / "run2")


def _best_accuracy(work: Path, label: str) -> float:
    from gbmbench.report import parse_cell

    _, rows = read_csv_table(work / "report" / "performance_first.csv")
    return max(parse_cell(r[2])[0] for r in rows if r[0] == label)


@pytest.mark.slow
@pytest.mark.criterion(9, "end-to-end phantom sweep on CPU in < 15 min, reports emitted, learner accuracy > 0.9")
def test_ac09_end_to_end(e2e):
    work = e2e["work"]
    print(f"end-to-end: {e2e['seconds'] / 60:.2f} min, exit codes {e2e['codes']}")
    assert all(c == 0 for c in e2e["codes"].values()), e2e["codes"]
    assert e2e["seconds"] < 15 * 60
    records = load_records(work / "results")
    assert len(records) == 2 * 2 * 3 * 5
    assert all(r["status"] == "ok" for r in records)
    for name in ("performance_first", "complexity_first"):
        for ext in ("csv", "md"):
            assert (work / "report" / f"{name}.{ext}").exists()
    header, rows = read_csv_table(work / "report" / "performance_first.csv")
    assert header[-3:] == ["Accuracy", "F1", "AUC"] and len(rows) == 4
    chead, crows = read_csv_table(work / "report" / "complexity_first.csv")
    assert chead[2:] == ["FLOPs (G)", "Params (M)", "Batch time (s)", "Runtime (min)"] and len(crows) == 4
    assert list((work / "report" / "gallery").glob("*.png"))
    acc = {label: _best_accuracy(work, label) for label in ("CNN+Attention (SE)", "CNN")}
    print("best-batch accuracy:", {k: round(v, 4) for k, v in acc.items()})
    assert acc["CNN+Attention (SE)"] > 0.9


def _final_losses(work: Path) -> dict[str, float]:
    return {r["unit"]: r["final_loss"] for r in load_records(work / "results")}


@pytest.mark.slow
@pytest.mark.criterion(10, "repeat run: identical folds and sample plans, final losses within 1e-6")
def test_ac10_determinism(e2e, e2e_repeat):
    a, b = e2e["work"], e2e_repeat["work"]
    assert all(c == 0 for c in e2e_repeat["codes"].values())
    assert (a / "splits/first/folds.json").read_text() == (b / "splits/first/folds.json").read_text()
    plans_a = sorted(p.relative_to(a) for p in (a / "balance").rglob("*_plan.json"))
    plans_b = sorted(p.relative_to(b) for p in (b / "balance").rglob("*_plan.json"))
    assert plans_a == plans_b and len(plans_a) == 15
    for rel in plans_a:
        assert SamplePlan.load(a / rel).to_dict() == SamplePlan.load(b / rel).to_dict()
    la, lb = _final_losses(a), _final_losses(b)
    assert la.keys() == lb.keys() and len(la) == 60
    worst = max(abs(la[k] - lb[k]) for k in la)
    print(f"largest final-loss difference {worst:.3g}")
    assert worst < 1e-6


@pytest.mark.slow
@pytest.mark.criterion(2, "no-leakage audit on the 30-patient phantom sweep")
def test_ac02_no_leakage(e2e):
    work = e2e["work"]
    folds = json.loads((work / "splits/first/folds.json").read_text())["folds"]
    violations = []
    records = load_records(work / "results")
    assert records
    for rec in records:
        f = rec["fold"]
        train = {p for p, k in folds.items() if k != f}
        val = {p for p, k in folds.items() if k == f}
        if set(rec["train_patients"]) != train or set(rec["val_patients"]) - val:
            violations.append((rec["unit"], "split"))
        # every training sample (real, synthetic or augmented) derives only from these patients
        if not set(rec["training_sources"]) <= train:
            violations.append((rec["unit"], "training sources"))
        if any(p["sample_id"] not in val for p in rec["predictions"]):
            violations.append((rec["unit"], "validation contains non-validation or synthetic samples"))
        plan = SamplePlan.load(work / rec["plan_file"])
        closure = set(plan.real_refs) | plan.parent_patients()
        if not closure <= train or closure & val:
            violations.append((rec["unit"], "plan provenance"))
        if plan.fold != f:
            violations.append((rec["unit"], "plan fold"))
    n_synthetic = sum(r["n_train_synthetic"] for r in records)
    print(f"{len(records)} units audited, {n_synthetic} synthetic training samples, {len(violations)} violations")
    assert violations == []


# ------------------------------------------------------------------ 3


@pytest.mark.criterion(3, "fold partition and +-1 stratification on 100 random phantom cohorts")
def test_ac03_fold_integrity():
    rng = np.random.default_rng(2024)
    bad = 0
    for trial in range(100):
        n = int(rng.integers(10, 121))
        labels = sample_phantom_labels(n, int(rng.integers(0, 2**31)))
        fa = make_folds(labels, k=5, seed=trial)
        counts = {c: sum(1 for v in labels.values() if v == c) for c in CLASS_ORDER}
        ok = set(fa.folds) == set(labels)
        for f in range(5):
            ok &= not set(fa.train_patients(f)) & set(fa.val_patients(f))
            per = fa.class_counts(f)
            ok &= all(abs(per[c] - counts[c] / 5) <= 1 for c in CLASS_ORDER)
        ok &= sum(len(fa.val_patients(f)) for f in range(5)) == n
        bad += not ok
    assert bad == 0


# ------------------------------------------------------------------ 4


@pytest.mark.criterion(4, "prep outputs: in-mask mean and SD within tolerance, background exactly 0")
def test_ac04_normalization():
    from gbmbench.cohort import phantom_volume

    cfg = PrepConfig(target_dims=(32, 32, 32))
    worst_mean = worst_sd = 0.0
    for i in range(12):
        raw = phantom_volume(CLASS_ORDER[i % 3], 1 + i % 2, np.random.default_rng([11, i]), size=40)
        out = preprocess(Volume(raw, np.diag([2.5, 2.5, 3.0, 1.0])), cfg)
        inside = out.data[out.mask].astype(np.float64)
        worst_mean = max(worst_mean, abs(inside.mean()))
        worst_sd = max(worst_sd, abs(inside.std() - 1))
        assert np.all(out.data[~out.mask] == 0)
    print(f"worst |mean| {worst_mean:.2e}, worst |sd-1| {worst_sd:.2e}")
    assert worst_mean < 1e-5 and worst_sd < 1e-4


# ------------------------------------------------------------------ 5


@pytest.mark.criterion(5, "all eleven TOY families: 3 logits, softmax, gradients, slice order, < 3 min")
def test_ac05_zoo_suite():
    t0 = time.perf_counter()
    specs = [toy_scale(s) for s in paper_catalog()]
    assert {s.family for s in specs} == set(Family)
    for spec in specs:
        model = build(spec, seed=0)
        x = torch.randn(2, *spec.input_shape, generator=torch.Generator().manual_seed(1))
        logits = model(x)
        assert logits.shape == (2, 3), spec.key
        s = torch.softmax(logits.detach().double(), dim=1).sum(dim=1)
        assert torch.allclose(s, torch.ones_like(s), atol=1e-5), spec.key
        logits.sum().backward()
        dead = [n for n, p in model.named_parameters() if p.requires_grad and (p.grad is None or not p.grad.abs().sum())]
        assert dead == [], (spec.key, dead)
        if spec.family in SEQUENCE_FAMILIES:
            model.eval()
            with torch.no_grad():
                flipped = model(torch.flip(x, dims=[2]))
                assert not torch.allclose(model(x), flipped, atol=1e-6), spec.key
    seconds = time.perf_counter() - t0
    print(f"zoo suite {seconds:.1f} s")
    assert seconds < 180


# ------------------------------------------------------------------ 6


@pytest.mark.criterion(6, "SWIN3D PAPER structure: patch 4, widths 48-384, resolutions 32-4")
def test_ac06_swin_structure():
    spec = paper_spec("SWIN3D")
    with torch.device("meta"):
        model = build(spec)
        _, stages = model.forward_features(torch.empty(1, *spec.input_shape), return_stages=True)
    assert tuple(model.patch_embed.kernel_size) == (4, 4, 4)
    assert tuple(model.patch_embed.stride) == (4, 4, 4)
    got = [tuple(st.shape[1:]) for st in stages]
    print("stage outputs (C, D, H, W):", got)
    assert got == [(c, r, r, r) for c, r in zip((48, 96, 192, 384), (32, 16, 8, 4))]


# ------------------------------------------------------------------ 7


@pytest.mark.criterion(7, "metrics equal brute-force oracles within 1e-9 on 1000 random instances")
def test_ac07_metric_oracle():
    assert check_metric_oracles(compute_metrics, 1000, seed=7) == 0


# ------------------------------------------------------------------ 8


@pytest.mark.criterion(8, "profiler: exact params for linear and TOY CNN3D, FLOPs additive")
def test_ac08_profiler_exactness(capsys):
    rec = profile(torch.nn.Linear(4, 3), (4,), timing=False)
    assert (rec.params, rec.flops_per_sample) == (15, 24)

    spec = toy_scale(paper_spec("CNN3D"))
    w, side = spec.params["widths"], spec.input_shape[-1]
    expected = (
        conv_params(1, w[0], 3, bias=False) + 2 * w[0]
        + conv_params(w[0], w[1], 3, bias=False) + 2 * w[1]
        + conv_params(w[1], w[2], 3, bias=False) + 2 * w[2]
        + linear_params(w[2] * (side // 8) ** 3, 3)
    )
    assert count_params(build(spec, seed=0)) == expected

    a = torch.nn.Sequential(torch.nn.Conv3d(1, 3, 3, padding=1), torch.nn.BatchNorm3d(3), torch.nn.ReLU())
    b = torch.nn.Sequential(torch.nn.AdaptiveAvgPool3d(2), torch.nn.Flatten(), torch.nn.Linear(24, 3))
    x = torch.randn(2, 1, 8, 8, 8)
    whole = torch.nn.Sequential(a, b).eval()
    assert count_macs(whole, x).flops == count_macs(a.eval(), x).flops + count_macs(b.eval(), a(x)).flops

    # informational: PAPER-scale Swin params next to the published value
    with torch.device("meta"):
        swin = build(paper_spec("SWIN3D"))
    ours = count_params(swin) / 1e6
    print(f"Swin PAPER params {ours:.4f} M vs published 7.8644 M ({(ours - 7.8644) / 7.8644:+.2%})")


# ------------------------------------------------------------------ 11

# (label, batch) rows of the published performance table
REFERENCE_ROWS = {
    ("2DViT+LSTM", 1), ("2DViT+LSTM", 8), ("3DViT", 1), ("3DViT", 8), ("CNN", 1), ("CNN", 8),
    ("CNN+Attention (SE)", 1), ("CNN+Attention (SE)", 8), ("CNN+LSTM", 1), ("CNN+LSTM", 8),
    ("CNN+ShiftWindowPatch", 1), ("CNN+ShiftWindowPatch", 8), ("LSTM", 1), ("LSTM", 8),
    ("2D-Mamba (16 slices)", 1), ("2D-Mamba (16 slices)", 8), ("2D-Mamba (50 slices)", 1),
    ("2D-Mamba (50 slices)", 6), ("2D-Mamba+CNN", 1), ("2D-Mamba+CNN", 2), ("2D-Mamba+CNN", 4),
    ("2D-Mamba+CNN", 8), ("ResNet", 1), ("ResNet", 8), ("Swin Transformer", 1), ("Swin Transformer", 6),
}


@pytest.mark.parametrize("scale", ["PAPER", "TOY"])
@pytest.mark.criterion(11, "sweep plan enumerates exactly the published batch grid")
def test_ac11_batch_grid(scale):
    from gbmbench.config import RunConfig
    from gbmbench.pipeline import model_specs

    specs = model_specs(RunConfig({"scale": scale}))
    label = {s.key: s.label for s in specs}
    plan = sweep_plan(["first", "second"], specs, [21, 33, 42], 5)
    for stage in ("first", "second"):
        rows = {(label[u.model], u.batch_size) for u in plan if u.stage == stage}
        assert rows == REFERENCE_ROWS
    assert len(plan) == 2 * len(REFERENCE_ROWS) * 3 * 5

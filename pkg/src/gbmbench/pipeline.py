"""Workdir-based pipeline: each step reads its inputs from, and writes its
artifacts to, a working directory, running missing prerequisites first.

Layout::

    manifest.json                 scan
    qc/qc_log.csv, qc/previews/   qc
    labels.csv                    label
    prep/<stage>/                 prep (volumes, masks, cohort.json)
    splits/<stage>/folds.json     split
    balance/<stage>/seed<s>/      balance (fold_<i>_plan.json, fold_<i>_synthetic.npz)
    results/, sweep_state.json    sweep
    report/                       report

Every step leaves a ``.stamp`` JSON with the settings it used; a step whose
stamp no longer matches the config is rerun.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .balance import AugmentConfig, CodeSource, LatentCode, SamplePlan, latent_smote, train_autoencoder
from .cohort import CohortManifest, Stage, StageCohort, StageSample, scan_cohort, select_stage
from .config import RunConfig
from .errors import EmptyMask, EmptyStage, UserError, ZeroVariance
from .harness.folds import FoldAssignment, make_folds
from .harness.sweep import (
    BalancedSplit,
    StageData,
    SweepConfig,
    SweepReport,
    SweepState,
    UnitKey,
    atomic_write_json,
    real_training_split,
    run_experiment,
    run_unit,
)
from .harness.train import TrainingSample
from .labels import ConsolidatedLabel, Outcome, consolidate_cohort, read_labels_csv, write_labels_csv
from .prep import PrepConfig, load_atlas, preprocess
from .qc import GeometryThresholds, read_selection, run_qc, write_qc_log
from .volume import Volume, load_nifti, save_nifti, to_model_layout
from .zoo import Family, ModelSpec, Scale, paper_spec, toy_scale
from .zoo.spec import PAPER_INPUT, TOY_INPUT

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Workdir:
    root: Path

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def qc_log(self) -> Path:
        return self.root / "qc" / "qc_log.csv"

    @property
    def previews(self) -> Path:
        return self.root / "qc" / "previews"

    @property
    def labels(self) -> Path:
        return self.root / "labels.csv"

    def prep_dir(self, stage: str) -> Path:
        return self.root / "prep" / stage

    def stage_cohort(self, stage: str) -> Path:
        return self.prep_dir(stage) / "cohort.json"

    def folds(self, stage: str) -> Path:
        return self.root / "splits" / stage / "folds.json"

    def balance_dir(self, stage: str, seed: int) -> Path:
        return self.root / "balance" / stage / f"seed{seed}"

    def plan(self, stage: str, seed: int, fold: int) -> Path:
        return self.balance_dir(stage, seed) / f"fold_{fold}_plan.json"

    def synthetic(self, stage: str, seed: int, fold: int) -> Path:
        return self.balance_dir(stage, seed) / f"fold_{fold}_synthetic.npz"

    @property
    def results(self) -> Path:
        return self.root / "results"

    @property
    def sweep_state(self) -> Path:
        return self.root / "sweep_state.json"

    @property
    def report(self) -> Path:
        return self.root / "report"


def workdir_of(cfg: RunConfig) -> Workdir:
    return Workdir(cfg.resolve(cfg.workdir))


def _stamp_ok(path: Path, payload: dict) -> bool:
    stamp = path.with_name(path.name + ".stamp")
    return path.exists() and stamp.exists() and json.loads(stamp.read_text()) == payload


def _write_stamp(path: Path, payload: dict) -> None:
    path.with_name(path.name + ".stamp").write_text(json.dumps(payload, sort_keys=True))


# --------------------------------------------------------------------------- settings views

def prep_config(cfg: RunConfig) -> PrepConfig:
    n = cfg.target_dims or (PAPER_INPUT if cfg.scale == "PAPER" else TOY_INPUT)
    return PrepConfig(
        target_dims=(n, n, n),
        interpolation=cfg.interpolation,
        registration_backend=cfg.registration_backend,
        atlas_path=str(cfg.resolve(cfg.atlas_path)) if cfg.atlas_path else None,
        plugin_command=cfg.plugin_command or None,
        closing_radius=cfg.closing_radius,
    )


def thresholds(cfg: RunConfig) -> GeometryThresholds:
    return GeometryThresholds(cfg.max_inplane_spacing, cfg.max_slice_thickness, cfg.max_anisotropy_ratio, cfg.min_slices)


def augment_config(cfg: RunConfig) -> AugmentConfig | None:
    if not cfg.augment:
        return None
    return AugmentConfig(cfg.aug_rotation_deg, cfg.aug_translation_vox, cfg.aug_noise_sigma, cfg.aug_probability)


def model_specs(cfg: RunConfig) -> list[ModelSpec]:
    """Specs to sweep; 2D-Mamba expands into its 16- and 50-slice variants."""
    families = [Family.parse(f) for f in cfg.families] or list(Family)
    specs = []
    for fam in families:
        variants = [dict(n_slices=16), dict(n_slices=50)] if fam == Family.MAMBA2D else [{}]
        for extra in variants:
            spec = paper_spec(fam, **extra)
            if cfg.scale == "TOY":
                spec = toy_scale(spec)
            elif cfg.weights_dir and "weights" in spec.params:
                weights = cfg.resolve(cfg.weights_dir) / f"{spec.family.value.lower()}.pt"
                spec = ModelSpec(spec.family, Scale.PAPER, {**spec.params, "weights": str(weights)})
            specs.append(spec)
    return specs


def stages_of(cfg: RunConfig) -> list[str]:
    return [Stage.parse(s).slug for s in cfg.stages]


# --------------------------------------------------------------------------- steps

def step_scan(cfg: RunConfig, force: bool = False) -> CohortManifest:
    wd = workdir_of(cfg)
    if not cfg.data_root:
        raise UserError("data_root is not set (config key or --data-root)")
    root = cfg.resolve(cfg.data_root)
    payload = {"data_root": str(Path(root).resolve())}
    if not force and _stamp_ok(wd.manifest, payload):
        return CohortManifest.load(wd.manifest)
    manifest = scan_cohort(root)
    manifest.save(wd.manifest)
    _write_stamp(wd.manifest, payload)
    log.info("scan: %d series from %d patients", len(manifest.series), len(manifest.patients))
    return manifest


def step_qc(cfg: RunConfig, force: bool = False) -> dict[tuple[str, int], str | None]:
    wd = workdir_of(cfg)
    manifest = step_scan(cfg)
    payload = {"manifest": manifest.content_hash, "thresholds": thresholds(cfg).__dict__, "previews": cfg.qc_previews}
    if not force and _stamp_ok(wd.qc_log, payload):
        return read_selection(wd.qc_log)
    tps = sorted({int(Stage.parse(s)) for s in cfg.stages})
    result = run_qc(manifest, thresholds(cfg), wd.previews if cfg.qc_previews else None, timepoints=tps)
    write_qc_log(result.verdicts, wd.qc_log)
    _write_stamp(wd.qc_log, payload)
    return result.selection


def step_label(cfg: RunConfig, force: bool = False) -> dict[str, ConsolidatedLabel]:
    wd = workdir_of(cfg)
    manifest = step_scan(cfg)
    payload = {"manifest": manifest.content_hash}
    if not force and _stamp_ok(wd.labels, payload):
        return read_labels_csv(wd.labels)
    labels = consolidate_cohort(manifest.visits)
    write_labels_csv(labels, wd.labels)
    _write_stamp(wd.labels, payload)
    return labels


def _cohort_to_json(cohort: StageCohort) -> dict:
    return {
        "stage": cohort.stage.slug,
        "samples": [
            {"patient_id": s.patient_id, "timepoint": s.timepoint, "series_id": s.series_id,
             "volume_ref": s.volume_ref, "label": s.label.value}
            for s in cohort.samples
        ],
        "excluded": dict(sorted(cohort.excluded.items())),
    }


def load_stage_cohort(path: str | Path) -> StageCohort:
    d = json.loads(Path(path).read_text())
    samples = [StageSample(s["patient_id"], s["timepoint"], s["series_id"], s["volume_ref"], Outcome(s["label"]))
               for s in d["samples"]]
    return StageCohort(Stage.parse(d["stage"]), samples, d["excluded"])


def step_prep(cfg: RunConfig, force: bool = False) -> dict[str, StageCohort]:
    """Preprocess the QC-selected volume of every labelled patient per stage."""
    wd = workdir_of(cfg)
    manifest = step_scan(cfg)
    selection = step_qc(cfg)
    labels = step_label(cfg)
    pcfg = prep_config(cfg)
    out = {}
    atlas = None
    for stage in stages_of(cfg):
        payload = {"manifest": manifest.content_hash, "prep": repr(pcfg), "qc": thresholds(cfg).__dict__}
        cpath = wd.stage_cohort(stage)
        if not force and _stamp_ok(cpath, payload):
            out[stage] = load_stage_cohort(cpath)
            continue
        if atlas is None:
            atlas = load_atlas(pcfg)
        try:
            cohort = select_stage(manifest, stage, labels, selection)
        except EmptyStage as exc:
            log.warning("stage %s: %s", stage, exc)
            continue
        kept = []
        excluded = dict(cohort.excluded)
        for s in cohort.samples:
            try:
                v = preprocess(load_nifti(_series_path(manifest, s)), pcfg, atlas)
            except (EmptyMask, ZeroVariance) as exc:
                excluded[s.patient_id] = f"preprocessing failed: {exc}"
                log.warning("stage %s: excluding %s (%s)", stage, s.patient_id, exc)
                continue
            d = wd.prep_dir(stage)
            save_nifti(v.data, v.affine, d / f"{s.patient_id}.nii.gz")
            save_nifti(v.mask.astype(np.uint8), v.affine, d / f"{s.patient_id}_mask.nii.gz", dtype=np.uint8)
            kept.append(s)
        if not kept:
            log.warning("stage %s: no patient survived preprocessing", stage)
            continue
        cohort = StageCohort(cohort.stage, kept, excluded)
        cpath.parent.mkdir(parents=True, exist_ok=True)
        cpath.write_text(json.dumps(_cohort_to_json(cohort), indent=1) + "\n")
        _write_stamp(cpath, payload)
        out[stage] = cohort
    if not out:
        raise EmptyStage("no stage has usable patients")
    return out


def _series_path(manifest: CohortManifest, s: StageSample) -> Path:
    meta = next(m for m in manifest.series_at(s.patient_id, s.timepoint) if m.series_id == s.series_id)
    return manifest.path_of(meta)


def load_prepared(cfg: RunConfig, stage: str, patient_id: str) -> Volume:
    d = workdir_of(cfg).prep_dir(stage)
    v = load_nifti(d / f"{patient_id}.nii.gz")
    mask = load_nifti(d / f"{patient_id}_mask.nii.gz").data > 0.5
    return v.with_(mask=mask)


def step_split(cfg: RunConfig, force: bool = False) -> dict[str, FoldAssignment]:
    wd = workdir_of(cfg)
    cohorts = step_prep(cfg)
    out = {}
    for stage, cohort in cohorts.items():
        path = wd.folds(stage)
        payload = {"patients": sorted(cohort.labels().items()), "k": cfg.folds, "seed": cfg.seed}
        payload = json.loads(json.dumps(payload))
        if not force and _stamp_ok(path, payload):
            out[stage] = FoldAssignment.load(path)
            continue
        folds = make_folds(cohort, cfg.folds, cfg.seed)
        folds.save(path)
        _write_stamp(path, payload)
        out[stage] = folds
    return out


def stage_data(cfg: RunConfig) -> dict[str, StageData]:
    cohorts = step_prep(cfg)
    folds = step_split(cfg)
    out = {}
    for stage, cohort in cohorts.items():
        arrays = {s.patient_id: to_model_layout(load_prepared(cfg, stage, s.patient_id).data)[0]
                  for s in cohort.samples}
        labels = {s.patient_id: s.label.index for s in cohort.samples}
        out[stage] = StageData(stage, arrays, labels, folds[stage])
    return out


def _balance_payload(cfg: RunConfig, data: StageData, fold: int, seed: int) -> dict:
    return {
        "train": data.folds.train_patients(fold),
        "seed": seed,
        "ae_epochs": cfg.ae_epochs,
        "k": cfg.smote_k,
        "cap": cfg.smote_cap,
        "dims": list(next(iter(data.arrays.values())).shape),
        "prep": repr(prep_config(cfg)),
    }


def balance_fold(cfg: RunConfig, data: StageData, fold: int, seed: int) -> BalancedSplit:
    """Fold-local latent SMOTE; reuses stored results when the settings match."""
    wd = workdir_of(cfg)
    train = [p for p in data.folds.train_patients(fold) if p in data.arrays]
    real = [TrainingSample(p, data.arrays[p], data.labels[p], (p,)) for p in train]
    plan_path = wd.plan(data.stage, seed, fold)
    syn_path = wd.synthetic(data.stage, seed, fold)
    payload = _balance_payload(cfg, data, fold, seed)
    if _stamp_ok(plan_path, payload) and syn_path.exists():
        plan = SamplePlan.load(plan_path)
        with np.load(syn_path) as z:
            syn_arrays = {k: z[k] for k in z.files}
    else:
        ae = train_autoencoder([data.arrays[p] for p in train], seed=seed, epochs=cfg.ae_epochs)
        vectors = ae.encode([data.arrays[p] for p in train])
        outcome_of = {o.index: o for o in Outcome}
        codes = [LatentCode(p, outcome_of[data.labels[p]], vectors[i], CodeSource.REAL) for i, p in enumerate(train)]
        plan = latent_smote(codes, k=cfg.smote_k, cap=cfg.smote_cap or None, seed=seed)
        plan.fold, plan.stage = fold, data.stage
        syn_arrays = {}
        if plan.synthetic:
            decoded = ae.decode(np.stack([c.vector for c in plan.synthetic]))
            syn_arrays = {c.sample_id: decoded[i].astype(np.float32) for i, c in enumerate(plan.synthetic)}
        plan.save(plan_path)
        np.savez_compressed(syn_path, **syn_arrays)
        _write_stamp(plan_path, payload)
    plan.check_training_split(train)
    synthetic = [
        TrainingSample(c.sample_id, syn_arrays[c.sample_id], c.label.index, tuple(c.parents[:2]), synthetic=True)
        for c in plan.synthetic
    ]
    return BalancedSplit(samples=real + synthetic, plan=plan, plan_path=str(plan_path.relative_to(wd.root)))


def step_balance(cfg: RunConfig) -> list[Path]:
    data = stage_data(cfg)
    written = []
    for stage, d in data.items():
        for seed in cfg.seeds:
            for fold in range(d.folds.k):
                balance_fold(cfg, d, fold, seed)
                written.append(workdir_of(cfg).plan(stage, seed, fold))
    return written


def sweep_config(cfg: RunConfig) -> SweepConfig:
    return SweepConfig(
        epochs=cfg.epochs,
        learning_rate=cfg.learning_rate,
        augment=augment_config(cfg),
        timing_batches=cfg.timing_batches,
        max_units=cfg.max_units or None,
    )


def _check_dims(data: dict[str, StageData], specs: list[ModelSpec]) -> None:
    expected = next(iter(data.values())).arrays
    dims = next(iter(expected.values())).shape
    for spec in specs:
        if tuple(spec.input_shape[1:]) != tuple(dims):
            raise UserError(f"{spec.key} expects input {spec.input_shape[1:]} but prep produced {dims}; "
                            "set target_dims to match the model scale")


def _balancer(cfg: RunConfig):
    if not cfg.balance:
        return real_training_split

    def balancer(d, fold, seed):
        return balance_fold(cfg, d, fold, seed)

    return balancer


def step_sweep(cfg: RunConfig, specs: list[ModelSpec] | None = None) -> SweepReport:
    wd = workdir_of(cfg)
    data = stage_data(cfg)
    specs = specs or model_specs(cfg)
    _check_dims(data, specs)
    return run_experiment(
        data, specs, cfg.seeds, wd.results, sweep_config(cfg), balancer=_balancer(cfg),
        batch_sizes=cfg.batch_sizes or None, state_path=wd.sweep_state,
    )


def step_train(cfg: RunConfig, family: str, stage: str, batch_size: int, seed: int, fold: int) -> list[dict]:
    """Train and evaluate a single unit per spec of ``family``; records land where the sweep puts them."""
    wd = workdir_of(cfg)
    fam = Family.parse(family)
    specs = [s for s in model_specs(cfg.with_overrides({"families": [fam.value]}))]
    data = stage_data(cfg)
    if stage not in data:
        raise UserError(f"stage {stage!r} is not configured (stages = {sorted(data)})")
    d = data[stage]
    if not 0 <= fold < d.folds.k:
        raise UserError(f"--fold must lie in [0, {d.folds.k - 1}]")
    _check_dims(data, specs)
    split = _balancer(cfg)(d, fold, seed)
    state = SweepState.load(wd.sweep_state)
    records = []
    for spec in specs:
        key = UnitKey(stage, spec.key, batch_size, seed, fold)
        record = run_unit(key, spec, d, split, sweep_config(cfg))
        atomic_write_json(key.record_path(wd.results), record)
        state.mark(key, True)
        records.append(record)
    return records


def profile_specs(specs: list[ModelSpec], batch_size: int = 1, timing: bool = True,
                  n_timed: int = 20) -> dict[str, dict]:
    """Complexity of each spec. PAPER-scale specs are counted on the meta device (no timing)."""
    import torch

    from .harness.profile import profile
    from .zoo import build

    out = {}
    for spec in specs:
        if spec.scale == Scale.PAPER:
            with torch.device("meta"):
                model = build(spec, allow_random_init=True)
                rec = profile(model, spec.input_shape, batch_size, timing=False)
        else:
            rec = profile(build(spec, seed=0), spec.input_shape, batch_size, timing=timing, n_timed=n_timed)
        out[spec.key] = {"label": spec.label, "scale": spec.scale.value, **rec.to_dict()}
        log.info("profiled %s: %.4f M params, %.4f GFLOPs", spec.key, rec.params / 1e6, rec.flops_per_sample / 1e9)
    return out


def step_profile(cfg: RunConfig) -> Path:
    """PAPER-scale analytic complexity of the selected families next to the reference values."""
    from .report import emit_reference_comparison

    wd = workdir_of(cfg)
    families = [Family.parse(f) for f in cfg.families] or list(Family)
    specs = []
    for fam in families:
        variants = [dict(n_slices=16), dict(n_slices=50)] if fam == Family.MAMBA2D else [{}]
        specs += [paper_spec(fam, **v) for v in variants]
    profiles = profile_specs(specs, timing=False)
    wd.report.mkdir(parents=True, exist_ok=True)
    path = wd.report / "full_scale_profiles.json"
    path.write_text(json.dumps(profiles, indent=1, sort_keys=True) + "\n")
    emit_reference_comparison(profiles, wd.report, {"config_hash": cfg.hash(), "code_version": _code_version()})
    return path


def _code_version() -> str:
    from . import __version__

    return f"gbmbench {__version__}"


def step_report(cfg: RunConfig, formats=("csv", "md")) -> list[Path]:
    """Tables, plots and galleries from the stored unit records (read-only on results)."""
    from .errors import NoResults
    from .harness.sweep import aggregate, load_records
    from .report import emit_plots, emit_tables, provenance, render_gallery

    wd = workdir_of(cfg)
    records = load_records(wd.results)
    results = aggregate(records, wd.results)
    if not results:
        raise NoResults(f"no unit records under {wd.results}")
    prov = provenance(results, cfg.hash(), cfg.seeds)
    written = emit_tables(results, wd.report, formats, prov)
    written += emit_plots(results, wd.report / "plots", prov)

    # galleries from out-of-fold predictions of the best row per stage (first seed)
    for stage in sorted({r.stage for r in results}):
        rs = [r for r in results if r.stage == stage and r.aggregate["accuracy"][0] is not None]
        if not rs or not workdir_of(cfg).stage_cohort(stage).exists():
            continue
        best = max(rs, key=lambda r: (r.aggregate["accuracy"][0], -r.batch_size))
        seed = min(best.per_seed["accuracy"])
        entries = []
        for rec in records:
            if (rec["stage"], rec["model"], rec["batch_size"], rec["seed"]) != (stage, best.model, best.batch_size, seed):
                continue
            for p in rec.get("predictions", []):
                arr = to_model_layout(load_prepared(cfg, stage, p["sample_id"]).data)[0]
                entries.append({"sample_id": p["sample_id"], "array": arr, "y_true": p["y_true"],
                                "y_pred": int(np.argmax(p["proba"]))})
        out = wd.report / "gallery" / f"{stage}_{best.model}_batch{best.batch_size}.png"
        written.append(render_gallery(entries, cfg.gallery_per_class, out,
                                      f"{best.label}, batch {best.batch_size}, seed {seed}: out-of-fold predictions"))
    profiles = wd.report / "full_scale_profiles.json"
    if profiles.exists():
        from .report import emit_reference_comparison

        written += emit_reference_comparison(json.loads(profiles.read_text()), wd.report, prov)
    return written

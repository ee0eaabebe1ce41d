import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image
from scipy import ndimage

from gbmbench.cohort import Outcome, SeriesMeta, phantom_volume
from gbmbench.qc import (
    QC_LOG_HEADER,
    GeometryThresholds,
    QCVerdict,
    check_geometry,
    clarity_score,
    emit_preview,
    read_selection,
    run_qc,
    select_best_series,
    write_qc_log,
)


def meta(spacing=(1.0, 1.0, 1.0), thickness=None, slices=128, sid="s", tp=1, pid="p"):
    return SeriesMeta(pid, tp, sid, tuple(spacing), thickness if thickness is not None else spacing[2],
                      (128, 128, slices), f"{pid}/{tp}/{sid}.nii.gz")


def oracle_pass(m: SeriesMeta, t: GeometryThresholds) -> bool:
    sx, sy, sz = m.voxel_spacing
    ok = True
    ok = ok and sx <= t.max_inplane_spacing and sy <= t.max_inplane_spacing
    ok = ok and m.slice_thickness <= t.max_slice_thickness
    ok = ok and max(sx, sy, sz) <= t.max_anisotropy_ratio * min(sx, sy, sz)
    ok = ok and m.dims[2] >= t.min_slices
    return ok


def test_isotropic_passes():
    v = check_geometry(meta())
    assert v.geometry_pass and v.reject_reasons == ()


def test_anisotropy_violation():
    v = check_geometry(meta(spacing=(1.0, 1.0, 6.0)), GeometryThresholds(max_anisotropy_ratio=4.0))
    assert not v.geometry_pass
    assert len(v.reject_reasons) == 1 and v.reject_reasons[0].startswith("anisotropy")


def test_each_violation_gives_one_reason():
    v = check_geometry(meta(spacing=(3.0, 1.0, 7.0), slices=10))
    assert len(v.reject_reasons) == 4


def test_random_metas_match_oracle():
    rng = np.random.default_rng(0)
    t = GeometryThresholds()
    for _ in range(1000):
        sp = tuple(float(x) for x in rng.uniform(0.3, 8.0, 3))
        m = meta(spacing=sp, thickness=float(rng.uniform(0.3, 9.0)), slices=int(rng.integers(5, 200)))
        assert check_geometry(m, t).geometry_pass == oracle_pass(m, t)


def test_threshold_invariants():
    with pytest.raises(ValueError):
        GeometryThresholds(max_anisotropy_ratio=0.5)
    with pytest.raises(ValueError):
        GeometryThresholds(min_slices=0)


def test_verdict_invariants():
    m = meta()
    with pytest.raises(ValueError):
        QCVerdict(m, geometry_pass=False, reject_reasons=("x",), selected=True)
    with pytest.raises(ValueError):
        QCVerdict(m, geometry_pass=True, reject_reasons=("x",))


spacing = st.floats(0.2, 8.0)


@given(spacing, spacing, spacing, st.floats(0.2, 9.0), st.integers(1, 300),
       st.floats(0, 3), st.floats(0, 3), st.floats(0, 3), st.integers(0, 10))
def test_geometry_monotone(sx, sy, sz, th, n, d1, d2, d3, d4):
    m = meta(spacing=(sx, sy, sz), thickness=th, slices=n)
    tight = GeometryThresholds(2.0, 6.5, 4.0, 20)
    loose = GeometryThresholds(2.0 + d1, 6.5 + d2, 4.0 + d3, max(1, 20 - d4))
    if check_geometry(m, tight).geometry_pass:
        assert check_geometry(m, loose).geometry_pass


def lesion_volume(seed=0, size=32):
    return phantom_volume(Outcome.PROGRESSION, 1, np.random.default_rng(seed), size=size)


def test_constant_volume_scores_zero():
    assert clarity_score(np.full((16, 16, 16), 5.0)) == 0.0


@pytest.mark.parametrize("size", [24, 32, 64])
@pytest.mark.parametrize("outcome", list(Outcome))
def test_blur_lowers_clarity(size, outcome):
    x = phantom_volume(outcome, 2, np.random.default_rng(size), size=size)
    assert clarity_score(x) > clarity_score(ndimage.uniform_filter(x, 5))


@given(st.floats(1e-3, 1e3))
def test_clarity_scale_invariant(a):
    x = lesion_volume()
    assert clarity_score(a * x) == pytest.approx(clarity_score(x), rel=1e-9)


def verdict(sid, score, ok=True):
    m = meta(sid=sid)
    return QCVerdict(m, ok, () if ok else ("bad",), score if ok else None)


def test_singleton_selected():
    chosen, rows = select_best_series([verdict("a", 1.0)])
    assert chosen.series.series_id == "a" and rows[0].selected


def test_tie_goes_to_smallest_id():
    chosen, _ = select_best_series([verdict("b", 2.0), verdict("a", 2.0)])
    assert chosen.series.series_id == "a"


def test_nothing_passes():
    chosen, rows = select_best_series([verdict("a", 0, ok=False)])
    assert chosen is None and not any(r.selected for r in rows)


def test_random_selection_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        cands = [verdict(f"s{i}", float(rng.integers(0, 3)), ok=bool(rng.random() < 0.7)) for i in range(5)]
        chosen, rows = select_best_series(cands)
        passing = [c for c in cands if c.geometry_pass]
        if not passing:
            assert chosen is None
            continue
        expected = passing[0]
        for c in passing[1:]:
            better = c.clarity_score > expected.clarity_score
            tie_smaller = c.clarity_score == expected.clarity_score and c.series.series_id < expected.series.series_id
            if better or tie_smaller:
                expected = c
        assert chosen.series.series_id == expected.series.series_id
        assert sum(r.selected for r in rows) == 1


def test_preview_dimensions(tmp_path):
    out = emit_preview(lesion_volume(size=64), tmp_path / "p.png")
    assert Image.open(out).size == (3 * 64, 64)


def test_preview_constant(tmp_path):
    out = emit_preview(np.full((16, 16, 16), 3.0), tmp_path / "c.png")
    assert len(np.unique(np.asarray(Image.open(out)))) == 1


def test_preview_shows_lesion(tmp_path):
    out = emit_preview(lesion_volume(size=64), tmp_path / "l.png")
    img = np.asarray(Image.open(out))
    axial = img[:, :64]
    # the progression blob sits near the centre and is the brightest structure
    assert axial[28:36, 28:36].mean() > 2 * axial[axial > 0].mean()


def test_run_qc_on_phantom(phantom30, tmp_path):
    root, m = phantom30
    result = run_qc(m, preview_dir=tmp_path / "previews", timepoints=[1])
    # every patient-timepoint keeps a selection: either the sharp series or the blurred fallback
    assert len(result.selection) == 30
    assert all(v is not None for v in result.selection.values())
    for v in result.verdicts:
        if v.series.series_id == "t1c_a" and v.geometry_pass:
            assert result.selection[(v.series.patient_id, 1)] == "t1c_a"
        if not v.geometry_pass:
            assert result.selection[(v.series.patient_id, 1)] == "t1c_b"
    assert any(not v.geometry_pass for v in result.verdicts)
    assert len(list((tmp_path / "previews").glob("*.png"))) == sum(v.geometry_pass for v in result.verdicts)

    log_a = write_qc_log(result.verdicts, tmp_path / "a.csv")
    log_b = write_qc_log(run_qc(m, timepoints=[1]).verdicts, tmp_path / "b.csv")
    assert log_a.read_bytes() == log_b.read_bytes()
    assert log_a.read_text().splitlines()[0] == ",".join(QC_LOG_HEADER)
    assert read_selection(log_a) == result.selection

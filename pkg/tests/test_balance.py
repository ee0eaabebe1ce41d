import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gbmbench.balance import (
    AugmentConfig,
    AutoEncoder3D,
    CodeSource,
    LatentCode,
    SamplePlan,
    augment,
    interpolate,
    latent_smote,
    nearest_neighbours,
    train_autoencoder,
)
from gbmbench.errors import InsufficientData, LeakageError
from gbmbench.labels import CLASS_ORDER, Outcome
from gbmbench.volume import Volume

P, U, S = CLASS_ORDER


def make_codes(counts, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    codes = []
    for cls, n in zip(CLASS_ORDER, counts):
        for i in range(n):
            codes.append(LatentCode(f"{cls.value[:3]}{i}", cls, rng.normal(size=dim)))
    return codes


# ---------------------------------------------------------------- autoencoder

@pytest.fixture(scope="module")
def trained_ae(prepped20):
    vols, _ = prepped20
    return train_autoencoder(vols, seed=0)


def test_ae_shape_contract(trained_ae, prepped20):
    vols, _ = prepped20
    codes = trained_ae.encode(vols[:3])
    assert codes.shape == (3, 256)
    assert trained_ae.decode(codes).shape == (3, 32, 32, 32)


def test_ae_beats_constant_predictor(trained_ae, prepped20):
    vols, _ = prepped20
    x = np.stack(vols).astype(np.float64)
    recon = trained_ae.reconstruct(vols)
    mse = np.mean((recon - x) ** 2)
    baseline = np.mean((x - x.mean()) ** 2)
    assert mse < baseline


def test_ae_deterministic(prepped20):
    vols, _ = prepped20
    a = train_autoencoder(vols[:4], seed=3, epochs=2)
    b = train_autoencoder(vols[:4], seed=3, epochs=2)
    probe = [vols[5]]
    assert np.abs(a.encode(probe) - b.encode(probe)).max() < 1e-6


def test_ae_does_not_touch_global_rng(prepped20):
    vols, _ = prepped20
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    train_autoencoder(vols[:2], seed=9, epochs=1)
    assert torch.equal(torch.rand(3), expected)


def test_ae_needs_two_volumes(prepped20):
    with pytest.raises(InsufficientData):
        train_autoencoder(prepped20[0][:1], seed=0)


def test_ae_rejects_bad_dims():
    with pytest.raises(ValueError):
        AutoEncoder3D((30, 30, 30))


# ---------------------------------------------------------------- SMOTE

def test_interpolate_endpoints_and_midpoint():
    za, zb = np.array([0.0, 0.0]), np.array([2.0, 4.0])
    assert np.array_equal(interpolate(za, zb, 0.0), za)
    assert np.array_equal(interpolate(za, zb, 1.0), zb)
    assert np.array_equal(interpolate(za, zb, 0.5), [1.0, 2.0])


def test_latent_code_invariants():
    v = np.zeros(2)
    with pytest.raises(ValueError):
        LatentCode("a", P, v, CodeSource.REAL, ("x", "y", 0.5))
    with pytest.raises(ValueError):
        LatentCode("a", P, v, CodeSource.SYNTHETIC, ("x", "x", 0.5))
    with pytest.raises(ValueError):
        LatentCode("a", P, v, CodeSource.SYNTHETIC, ("x", "y", 1.5))


def test_smote_10_4_2_balances_to_majority():
    codes = make_codes((10, 4, 2))
    plan = latent_smote(codes, cap=20, seed=0)
    assert plan.counts_before == {P: 10, U: 4, S: 2}
    assert plan.counts_after == {P: 10, U: 10, S: 10}
    got = {c: 0 for c in CLASS_ORDER}
    for c in plan.real_refs:
        got[plan.real_labels[c]] += 1
    for s in plan.synthetic:
        got[s.label] += 1
    assert got == {P: 10, U: 10, S: 10}
    # exhaustive provenance walk
    by_id = {c.sample_id: c for c in codes}
    for s in plan.synthetic:
        a, b, lam = s.parents
        assert a != b
        assert by_id[a].label == by_id[b].label == s.label
        assert a in plan.real_refs and b in plan.real_refs


def test_smote_respects_cap():
    plan = latent_smote(make_codes((10, 4, 2)), cap=6, seed=0)
    assert plan.counts_after == {P: 10, U: 6, S: 6}


def test_smote_partner_is_a_nearest_neighbour():
    codes = make_codes((12, 7, 0), dim=3, seed=4)
    plan = latent_smote(codes, k=2, seed=1)
    members = [c for c in codes if c.label == U]
    vectors = np.stack([m.vector for m in members])
    ids = [m.sample_id for m in members]
    for s in plan.synthetic:
        a, b, _ = s.parents
        i = ids.index(a)
        d = np.linalg.norm(vectors - vectors[i], axis=1)
        d[i] = np.inf
        assert d[ids.index(b)] <= np.sort(d)[1]


def test_nearest_neighbours_ties_by_index():
    v = np.array([[0.0], [1.0], [-1.0], [2.0]])
    assert list(nearest_neighbours(v, 0, 2)) == [1, 2]


def test_single_sample_class_falls_back():
    plan = latent_smote(make_codes((5, 1, 3)), seed=0)
    assert plan.counts_after[U] == 1
    assert not any(s.label == U for s in plan.synthetic)
    assert len(plan.fallbacks) == 1
    assert plan.counts_after[S] == 5


def test_smote_is_order_independent():
    codes = make_codes((9, 3, 3))
    small = latent_smote(codes, target_counts={P: 9, U: 5, S: 3}, seed=2)
    big = latent_smote(codes, target_counts={P: 9, U: 9, S: 3}, seed=2)
    assert [s.parents for s in big.synthetic[:2]] == [s.parents for s in small.synthetic]


def test_plan_roundtrip(tmp_path):
    codes = make_codes((6, 3, 2))
    plan = latent_smote(codes, seed=5)
    plan.fold, plan.stage = 2, "first"
    back = SamplePlan.load(plan.save(tmp_path / "fold_2_plan.json"))
    assert back.to_dict() == plan.to_dict()
    rebuilt = SamplePlan.from_dict(plan.to_dict(), {c.sample_id: c.vector for c in codes})
    for x, y in zip(rebuilt.synthetic, plan.synthetic):
        assert np.array_equal(x.vector, y.vector)


def test_leakage_guard():
    plan = latent_smote(make_codes((6, 3, 2)), seed=0)
    plan.check_training_split(plan.real_refs)
    outsider = sorted(plan.parent_patients())[0]
    with pytest.raises(LeakageError):
        plan.check_training_split([p for p in plan.real_refs if p != outsider])
    with pytest.raises(LeakageError):
        plan.check_training_split(plan.real_refs, split="val")


@settings(max_examples=40, deadline=None)
@given(
    st.tuples(st.integers(0, 12), st.integers(0, 12), st.integers(0, 12)).filter(lambda t: sum(t) > 0),
    st.integers(1, 6),
    st.one_of(st.none(), st.integers(1, 15)),
    st.integers(0, 1000),
)
def test_smote_properties(counts, k, cap, seed):
    codes = make_codes(counts, seed=seed)
    plan = latent_smote(codes, k=k, cap=cap, seed=seed)
    vectors = {c.sample_id: c.vector for c in codes}
    majority = max(counts)
    for cls, n in zip(CLASS_ORDER, counts):
        after = plan.counts_after[cls]
        assert after >= n
        if after > n:
            assert cap is None or after <= cap
            assert after <= majority
    for s in plan.synthetic:
        a, b, lam = s.parents
        assert np.linalg.norm(s.vector - (vectors[a] + lam * (vectors[b] - vectors[a]))) == 0.0
        assert plan.real_labels[a] == plan.real_labels[b] == s.label
    assert plan.parent_patients() <= set(plan.real_refs)


# ---------------------------------------------------------------- augmentation

def brain(seed=0):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(24, 24, 24))
    mask = np.zeros_like(data, bool)
    mask[4:20, 4:20, 4:20] = True
    data[~mask] = 0
    return Volume(data, mask=mask)


def test_identity_bounds():
    v = brain()
    out = augment(v, AugmentConfig(0, 0, 0, 1.0), np.random.default_rng(0))
    assert np.array_equal(out.data, v.data)


def test_noise_sd():
    v = brain()
    out = augment(v, AugmentConfig(0, 0, 0.02, 1.0), np.random.default_rng(1))
    diff = (out.data - v.data)[v.mask]
    assert abs(diff.std() - 0.02) < 0.1 * 0.02


def test_augment_deterministic_and_shape():
    v = brain()
    a = augment(v, AugmentConfig(probability=1.0), np.random.default_rng(5))
    b = augment(v, AugmentConfig(probability=1.0), np.random.default_rng(5))
    assert a.data.shape == v.data.shape
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, v.data)


def test_augment_probability_zero():
    v = brain()
    out = augment(v.data, AugmentConfig(probability=0.0), np.random.default_rng(0))
    assert np.array_equal(out, v.data)


def test_integer_translation_moves_content():
    data = np.zeros((16, 16, 16))
    data[8, 8, 8] = 1.0
    cfg = AugmentConfig(max_rotation_deg=0, max_translation_vox=3, noise_sigma=0, probability=1.0)
    rng = np.random.default_rng(11)
    out = augment(data, cfg, rng)
    # mass is conserved for a shift that keeps the voxel inside the grid
    assert out.sum() == pytest.approx(1.0, abs=1e-9)
    com = np.array(np.unravel_index(np.argmax(out), out.shape))
    assert np.all(np.abs(com - 8) <= 3)


def test_augment_config_invariants():
    with pytest.raises(ValueError):
        AugmentConfig(probability=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(noise_sigma=-1)

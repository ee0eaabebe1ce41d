import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gbmbench import prep
from gbmbench.cohort import Outcome, phantom_volume
from gbmbench.errors import EmptyMask, PluginFailure, UserError, ZeroVariance
from gbmbench.prep import (
    PrepConfig,
    preprocess,
    read_transform,
    register_rigid,
    resample,
    run_plugin,
    skull_strip,
    znormalize,
)
from gbmbench.volume import Volume, load_nifti, save_volume, to_model_layout
from oracles import dice, sphere

PLUGIN = PrepConfig(target_dims=(32, 32, 32), registration_backend="plugin")


def test_identity_resample_exact():
    rng = np.random.default_rng(0)
    v = Volume(rng.normal(size=(128, 128, 128)))
    out = resample(v, PrepConfig())
    assert np.array_equal(out.data, v.data)
    assert np.array_equal(out.affine, v.affine)


def test_constant_resample():
    out = resample(Volume(np.full((100, 100, 100), 7.25)), PrepConfig())
    assert out.shape == (128, 128, 128)
    np.testing.assert_allclose(out.data, 7.25, rtol=1e-12, atol=0)


def test_linear_ramp_resample():
    x = np.arange(64, dtype=np.float64)
    v = Volume(np.broadcast_to(x[:, None, None], (64, 64, 64)).copy())
    out = resample(v, PrepConfig())
    # output voxel j sits at input coordinate j * 63 / 127
    analytic = np.arange(128) * 63 / 127
    dev = np.abs(out.data - analytic[:, None, None]).max()
    assert dev < 1e-6 * 63


def test_resample_preserves_field_of_view():
    aff = np.diag([1.2, 0.9, 3.0, 1.0])
    out = resample(Volume(np.zeros((50, 60, 20)), aff), PrepConfig(target_dims=(32, 32, 32)))
    np.testing.assert_allclose(np.array(out.spacing) * 31, [1.2 * 49, 0.9 * 59, 3.0 * 19])


def test_resample_mask_nearest():
    mask = np.zeros((20, 20, 20), bool)
    mask[5:15, 5:15, 5:15] = True
    out = resample(Volume(np.zeros((20, 20, 20)), mask=mask), PrepConfig(target_dims=(40, 40, 40)))
    assert out.mask.dtype == bool and out.mask.shape == (40, 40, 40)


def test_config_rejects_noncubic():
    with pytest.raises(UserError):
        PrepConfig(target_dims=(32, 32, 16))
    with pytest.raises(UserError):
        PrepConfig(target_dims=(4, 4, 4))


def test_skull_strip_sphere():
    truth = sphere((64, 64, 64), (31.5, 31.5, 31.5), 18)
    rng = np.random.default_rng(1)
    data = np.where(truth, 100.0, 0.0) + rng.normal(0, 3, truth.shape)
    mask = skull_strip(Volume(data)).mask
    assert dice(mask, truth) > 0.95


def test_skull_strip_constant():
    with pytest.raises(EmptyMask):
        skull_strip(Volume(np.ones((16, 16, 16))))


def test_skull_strip_keeps_largest_component():
    big = sphere((48, 48, 48), (14, 24, 24), 9)
    small = sphere((48, 48, 48), (38, 24, 24), 4)
    mask = skull_strip(Volume(np.where(big | small, 50.0, 0.0))).mask
    assert mask[14, 24, 24] and not mask[38, 24, 24]


def test_skull_strip_deterministic():
    v = Volume(phantom_volume(Outcome.PSEUDOPROGRESSION, 1, np.random.default_rng(0), size=32))
    assert np.array_equal(skull_strip(v).mask, skull_strip(v).mask)


def test_skull_strip_fraction_on_phantom():
    v = Volume(phantom_volume(Outcome.PROGRESSION, 2, np.random.default_rng(0), size=48))
    frac = skull_strip(v).mask.mean()
    assert 0.05 <= frac <= 0.70


def test_identity_registration_is_bitwise():
    v = Volume(np.random.default_rng(2).normal(size=(16, 16, 16)))
    assert register_rigid(v, None) is v


def test_plugin_recovers_translation():
    truth = sphere((32, 32, 32), (15, 16, 17), 7)
    fixed = Volume(np.where(truth, 10.0, 1.0), np.diag([2.0, 2.0, 2.0, 1.0]))
    offset = np.array([3, -2, 4])
    moving = Volume(np.roll(fixed.data, offset, axis=(0, 1, 2)), fixed.affine)

    def stub(mov, fix):
        t = np.eye(4)
        t[:3, 3] = -2.0 * offset
        return t

    out = register_rigid(moving, fixed, PLUGIN, plugin=stub)
    inner = (slice(5, 27),) * 3
    err = np.abs(out.data[inner] - fixed.data[inner]).mean()
    assert err < 1e-3 * (fixed.data.max() - fixed.data.min())


def test_plugin_command_roundtrip(tmp_path):
    script = tmp_path / "ident.py"
    script.write_text("import sys\nopen(sys.argv[3], 'w').write('1 0 0 0  0 1 0 0  0 0 1 0')\n")
    v = Volume(np.random.default_rng(3).normal(size=(8, 8, 8)))
    t = run_plugin(f"{sys.executable} {script} {{moving}} {{fixed}} {{out_transform}}", v, v)
    assert np.array_equal(t, np.eye(4))


def test_plugin_malformed_transform(tmp_path):
    script = tmp_path / "bad.py"
    script.write_text("import sys\nopen(sys.argv[1], 'w').write('1 2 3')\n")
    v = Volume(np.zeros((8, 8, 8)))
    with pytest.raises(PluginFailure):
        run_plugin(f"{sys.executable} {script} {{out_transform}}", v, v)


def test_plugin_nonzero_exit(tmp_path):
    v = Volume(np.zeros((8, 8, 8)))
    with pytest.raises(PluginFailure):
        run_plugin(f"{sys.executable} -c 'raise SystemExit(3)'", v, v)


def test_read_transform_rejects_non_rigid(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("2 0 0 0 0 1 0 0 0 0 1 0")
    with pytest.raises(PluginFailure):
        read_transform(p)


def test_znormalize_hand_values():
    data = np.zeros((3, 1, 1))
    data[:, 0, 0] = [1, 2, 3]
    out = znormalize(Volume(data, mask=np.ones((3, 1, 1), bool)))
    np.testing.assert_allclose(out.data.ravel(), [-1.224744871391589, 0, 1.224744871391589], atol=1e-12)


def test_znormalize_idempotent():
    rng = np.random.default_rng(4)
    v = Volume(rng.normal(5, 3, (16, 16, 16)), mask=rng.random((16, 16, 16)) < 0.5)
    once = znormalize(v)
    assert np.abs(znormalize(once).data - once.data).max() < 1e-6


def test_znormalize_constant_in_mask():
    mask = np.zeros((8, 8, 8), bool)
    mask[2:5, 2:5, 2:5] = True
    data = np.random.default_rng(5).normal(size=(8, 8, 8))
    data[mask] = 4.0
    with pytest.raises(ZeroVariance):
        znormalize(Volume(data, mask=mask))


def test_znormalize_needs_mask():
    with pytest.raises(EmptyMask):
        znormalize(Volume(np.ones((4, 4, 4))))


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(np.float64, (6, 7, 5), elements=st.floats(-1e4, 1e4)),
    hnp.arrays(bool, (6, 7, 5)),
)
def test_znormalize_moments(data, mask):
    inside = data[mask]
    if inside.size < 2 or inside.std() <= 1e-6 * max(1.0, abs(inside.mean())):
        return
    out = znormalize(Volume(data, mask=mask)).data
    assert abs(out[mask].mean()) < 1e-5
    assert abs(out[mask].std() - 1) < 1e-4
    assert np.all(out[~mask] == 0)


def test_preprocess_order(monkeypatch):
    calls = []
    for name in ("resample", "skull_strip", "register_rigid", "znormalize"):
        fn = getattr(prep, name)
        monkeypatch.setattr(prep, name, lambda *a, _f=fn, _n=name, **k: (calls.append(_n), _f(*a, **k))[1])
    v = Volume(phantom_volume(Outcome.STABLE, 1, np.random.default_rng(0), size=24))
    prep.preprocess(v, PrepConfig(target_dims=(16, 16, 16)))
    assert calls == ["resample", "skull_strip", "register_rigid", "znormalize"]


@settings(max_examples=8, deadline=None)
@given(st.sampled_from(list(Outcome)), st.integers(1, 3), st.integers(0, 10_000), st.sampled_from([20, 28, 36]))
def test_preprocess_output_contract(outcome, tp, seed, size):
    v = Volume(phantom_volume(outcome, tp, np.random.default_rng(seed), size=size), np.diag([2.0, 2.0, 2.0, 1.0]))
    out = preprocess(v, PrepConfig(target_dims=(24, 24, 24)))
    assert out.shape == (24, 24, 24)
    assert np.isfinite(out.data).all()
    assert abs(out.data[out.mask].mean()) < 1e-5
    assert abs(out.data[out.mask].std() - 1) < 1e-4
    assert np.all(out.data[~out.mask] == 0)


def test_volume_roundtrip_and_layout(tmp_path):
    rng = np.random.default_rng(6)
    v = Volume(rng.normal(size=(4, 5, 6)).astype(np.float32), np.diag([1.0, 2.0, 3.0, 1.0]),
               mask=rng.random((4, 5, 6)) < 0.5)
    save_volume(v, tmp_path / "v.nii.gz", tmp_path / "m.nii.gz")
    back = load_nifti(tmp_path / "v.nii.gz")
    np.testing.assert_array_equal(back.data.astype(np.float32), v.data)
    assert back.spacing == (1.0, 2.0, 3.0)
    lay = to_model_layout(v.data)
    assert lay.shape == (1, 6, 5, 4)
    assert lay[0, 2, 3, 1] == v.data[1, 3, 2]

import json

import pytest

from gbmbench.cli import main


def test_zoo_list_prints_eleven(capsys):
    assert main(["zoo", "list"]) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.strip()]
    assert len(lines) == 11


def test_zoo_describe(capsys):
    assert main(["zoo", "describe", "swin3d"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["family"] == "SWIN3D"


def test_unknown_flag_is_user_error(capsys):
    assert main(["zoo", "list", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--bogus" in err


def test_missing_subcommand(capsys):
    assert main([]) == 1


def test_unknown_config_key(capsys):
    assert main(["scan", "--set", "epoch=3"]) == 1
    assert "did you mean" in capsys.readouterr().err


def test_unknown_family(capsys):
    assert main(["zoo", "describe", "alexnet"]) == 1


def test_missing_data_root(tmp_path, capsys):
    assert main(["scan", "--data-root", str(tmp_path / "missing"), "--workdir", str(tmp_path / "w")]) == 1


def test_internal_error_exit_code(monkeypatch, capsys):
    import gbmbench.pipeline as pl

    def boom(cfg, force=False):
        raise RuntimeError("planted")

    monkeypatch.setattr(pl, "step_scan", boom)
    assert main(["scan"]) == 2
    assert "planted" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0


def test_config_schema(capsys):
    assert main(["config-schema"]) == 0
    assert "`seed`" in capsys.readouterr().out


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, work = root / "data", root / "work"
    assert main(["phantom", "--n", "10", "--seed", "3", "--size", "24", "--out", str(data)]) == 0
    cfg = root / "c.toml"
    cfg.write_text(
        f'data_root = "{data}"\nworkdir = "{work}"\nstages = ["first"]\nfamilies = ["CNN3D"]\n'
        'epochs = 1\nbatch_sizes = [2]\nseeds = [21]\nfolds = 2\nae_epochs = 2\n'
        'timing_batches = 20\n'
    )
    return root, data, work, cfg


def test_phantom_is_seeded(cli_run, tmp_path):
    root, data, *_ = cli_run
    other = tmp_path / "again"
    assert main(["phantom", "--n", "10", "--seed", "3", "--size", "24", "--out", str(other)]) == 0
    assert (data / "visits.csv").read_bytes() == (other / "visits.csv").read_bytes()


def test_steps_in_order(cli_run, capsys):
    _, _, work, cfg = cli_run
    for cmd in ("scan", "qc", "label", "prep", "split", "balance"):
        assert main([cmd, "--config", str(cfg)]) == 0, cmd
    out = capsys.readouterr().out
    assert "2 folds" in out
    assert main(["train", "--config", str(cfg), "--family", "CNN3D", "--batch", "2", "--fold", "1"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["unit"].endswith("/batch2/seed21/fold1")
    assert main(["sweep", "--config", str(cfg)]) == 0
    assert "executed 1" in capsys.readouterr().out  # fold 1 was already trained
    assert (work / "report" / "performance_first.csv").exists()
    before = _tree(work / "results")
    assert main(["report", "--config", str(cfg), "--format", "md"]) == 0
    assert _tree(work / "results") == before


def _tree(root):
    return {str(p.relative_to(root)): (p.stat().st_mtime_ns, p.read_bytes()) for p in root.rglob("*") if p.is_file()}


def test_train_bad_fold(cli_run):
    *_, cfg = cli_run
    assert main(["train", "--config", str(cfg), "--family", "CNN3D", "--fold", "7"]) == 1

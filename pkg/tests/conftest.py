"""Shared fixtures and the per-criterion acceptance summary."""

from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    n, title = crit
    entry = _CRITERIA.setdefault(n, {"title": title, "outcomes": []})
    if report.when == "call" or report.outcome != "passed":
        entry["outcomes"].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        outs = entry["outcomes"]
        if outs and all(o == "passed" for o in outs):
            verdict = "PASS"
        elif outs and all(o == "skipped" for o in outs):
            verdict = "SKIP"
        else:
            verdict = "FAIL"
        tr.write_line(f"AC{n:02d} {verdict}  {entry['title']}")


@pytest.fixture(scope="session")
def phantom30(tmp_path_factory):
    """30-patient phantom (32^3 volumes), 5 patients lack the second follow-up."""
    from gbmbench.cohort import generate_phantom_cohort

    root = tmp_path_factory.mktemp("phantom30")
    manifest = generate_phantom_cohort(30, 42, root, size=32, n_missing_second=5)
    return root, manifest


@pytest.fixture(scope="session")
def prepped20():
    """20 phantom volumes through the full prep chain at 32^3, with their class indices."""
    import numpy as np

    from gbmbench.cohort import CLASS_ORDER, phantom_volume
    from gbmbench.prep import PrepConfig, preprocess
    from gbmbench.volume import Volume

    cfg = PrepConfig(target_dims=(32, 32, 32))
    vols, labels = [], []
    for i in range(20):
        outcome = CLASS_ORDER[i % 3]
        raw = phantom_volume(outcome, 1, np.random.default_rng([7, i]), size=48)
        vols.append(preprocess(Volume(raw, np.diag([2.0, 2.0, 2.0, 1.0])), cfg).data.astype(np.float32))
        labels.append(outcome.index)
    return vols, labels

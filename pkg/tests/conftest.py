from __future__ import annotations

from collections import defaultdict

import pytest

CRITERIA = {
    1: "schedule identity",
    2: "CFG collapse",
    3: "Gaussian oracle end-to-end",
    4: "gradient fidelity",
    5: "fixed-length compression",
    6: "RVQ properties",
    7: "codec trainability",
    8: "bottleneck trend",
    9: "distillation efficacy",
    10: "determinism and persistence",
    11: "editing contract",
    12: "sigma_error anchors",
}

_outcomes: dict[int, list[tuple[str, str, float]]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number this test verifies")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _outcomes[mark.args[0]].append((item.name, rep.outcome, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, name in CRITERIA.items():
        runs = _outcomes.get(n)
        if not runs:
            tr.write_line(f"criterion {n:2d} {name:<30s} NOT RUN")
            continue
        ok = all(o == "passed" for _, o, _ in runs)
        secs = sum(d for _, _, d in runs)
        failed = [t for t, o, _ in runs if o != "passed"]
        tail = "" if ok else "  failing: " + ", ".join(failed)
        tr.write_line(f"criterion {n:2d} {name:<30s} {'PASS' if ok else 'FAIL'}  ({secs:.1f} s){tail}")

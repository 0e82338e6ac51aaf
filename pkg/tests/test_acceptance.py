"""Acceptance battery: one test and one printed pass/fail line per criterion.

Run with ``pytest -s tests/test_acceptance.py`` to see the lines inline; the
session summary at the end repeats all of them regardless of capture.
"""

import pytest

from gstransfer import acceptance

_LINES = {}


@pytest.fixture(scope="module", autouse=True)
def _summary(request):
    yield
    tr = request.config.pluginmanager.getplugin("terminalreporter")
    out = tr.write_line if tr is not None else print
    out("")
    out("acceptance summary:")
    for n in sorted(_LINES):
        out(_LINES[n])


@pytest.mark.parametrize("fn", acceptance.CRITERIA, ids=lambda f: f.__name__)
def test_criterion(fn):
    res = fn()
    _LINES[res.number] = res.line()
    print(res.line())
    assert res.passed, res.line()


def test_negative_control_dropping_g1_breaks_divergence():
    # path B without the wall flux term must not look divergence-free
    rel = acceptance.negative_control_g1()
    print(f"negative control: relative D_b without g1 = {rel:.3g}")
    assert rel > 1e-3

import numpy as np
import pytest

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        _ACCEPTANCE[num] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[num]
        line = f"C{num} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        tr.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


def random_triple(rng, n_a, n_b, r, decay=False):
    from sscg import LowRankTriple

    if r == 0:
        return LowRankTriple.zero(n_a, n_b)
    ql, _ = np.linalg.qr(rng.standard_normal((n_a, r)))
    qr, _ = np.linalg.qr(rng.standard_normal((n_b, r)))
    s = np.sort(rng.uniform(0.5, 2.0, r))[::-1]
    if decay:
        s = s * 10.0 ** -np.arange(r)
    return LowRankTriple(ql, np.diag(s), qr)


def random_spd(rng, n, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ev = np.geomspace(1.0, cond, n)
    m = (q * ev) @ q.T
    return 0.5 * (m + m.T)

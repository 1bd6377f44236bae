import numpy as np
import pytest
from hypothesis import settings

from dpsep.expfam import GaussianNat

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_spd(rng, d, lo=0.5, hi=5.0):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return q @ np.diag(rng.uniform(lo, hi, d)) @ q.T


def random_gaussian(rng, d, lo=0.5, hi=5.0):
    return GaussianNat(rng.standard_normal(d), random_spd(rng, d, lo, hi), proper=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance reporting: tests marked criterion(k, title) get one PASS/FAIL line
_verdicts = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.skipped:
        return
    num, title = mark.args
    failed = rep.failed or _verdicts.get(num, ("PASS",))[0] == "FAIL"
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.when == "call" or failed:
        _verdicts[num] = ("FAIL" if failed else "PASS", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_verdicts):
        status, title, detail = _verdicts[num]
        line = f"{status} [{num:2d}] {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))

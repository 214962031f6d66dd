import numpy as np
import pytest

from hypercloning import cloning as C
from hypercloning import model as M
from hypercloning.tensor import Rng


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny():
    config = M.get_preset("tiny")
    return config, M.init_random(config, Rng(7), np.float64)


@pytest.fixture(scope="session")
def micro():
    config = M.get_preset("micro")
    return config, M.init_random(config, Rng(11), np.float64)


@pytest.fixture(scope="session")
def micro_clone(micro):
    """2-fold symmetric clone of the micro fixture: (params, config, receipt)."""
    config, params = micro
    return C.expand_model(params, config, C.ExpansionConfig(2, 2, 2, 1, "symmetric"))


def perturb_gamma(params, rng, scale=0.3):
    """Copy with non-trivial norm gains and biases, so cloning tests see every term."""
    out = {k: v.copy() for k, v in params.items()}
    for k, v in out.items():
        if k.endswith((".gamma", ".beta")) or ".b_" in k:
            out[k] = v + scale * rng.standard_normal(v.shape)
    return out


# -- acceptance summary ---------------------------------------------------------

_CRITERIA = {}


@pytest.fixture
def detail(request):
    """Dict a criterion test fills with measured values for its summary line."""
    d = {}
    request.node._criterion_detail = d
    return d


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    n, title = mark.args
    d = getattr(item, "_criterion_detail", {})
    info = ", ".join(f"{k}={v}" for k, v in d.items())
    _CRITERIA.setdefault(n, []).append((title, rep.outcome, info))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title = _CRITERIA[n][0][0]
        ok = all(o == "passed" for _, o, _ in _CRITERIA[n])
        infos = "; ".join(i for _, _, i in _CRITERIA[n] if i)
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}" + (f" ({infos})" if infos else ""))

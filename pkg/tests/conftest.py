import numpy as np
import pytest


ACCEPTANCE_LINES: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")
    config.addinivalue_line("markers", "acceptance(label): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = f"error: {rep.longrepr.reprcrash.message}" if hasattr(rep.longrepr, "reprcrash") else "error"
    ACCEPTANCE_LINES[mark.args[0]] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k.rstrip("ab")), k)):
        status, detail = ACCEPTANCE_LINES[label]
        terminalreporter.write_line(f"criterion {label:<3s} {status}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def grid(lo=-8.0, hi=8.0, step=0.01):
    """Trapezoid grid on [lo, hi] including both ends."""
    n = int(round((hi - lo) / step)) + 1
    return np.linspace(lo, hi, n)


def npdf1(x, m, v):
    """Scalar normal density written out longhand, independent of the library."""
    return np.exp(-0.5 * (x - m) ** 2 / v) / np.sqrt(2.0 * np.pi * v)


def rand_spd(rng, d, lo=0.2, hi=2.0):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (q * rng.uniform(lo, hi, d)) @ q.T


def mvn_logpdf(x, mean, cov):
    """Multivariate normal log density by explicit inverse and determinant."""
    x = np.atleast_2d(x)
    d = mean.size
    inv = np.linalg.inv(cov)
    diff = x - mean
    q = np.einsum("ni,ij,nj->n", diff, inv, diff)
    return -0.5 * (d * np.log(2 * np.pi) + np.log(np.linalg.det(cov)) + q)

import numpy as np
import pytest

from covernet import synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, x, h=1e-6):
    """Independent finite-difference oracle (does not reuse covernet.gradcheck)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.ravel(a), np.ravel(b)
    keep = (np.abs(a) >= floor) | (np.abs(b) >= floor)
    if not keep.any():
        return 0.0
    return float(np.max(np.abs(a[keep] - b[keep]) / np.maximum(np.abs(a[keep]), np.abs(b[keep]))))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """30 classes x 10 synthetic 56x56 covers, with manifest and class table."""
    root = tmp_path_factory.mktemp("tiny")
    from covernet.classes import DEFAULT_CLASS_TABLE

    table = {c: DEFAULT_CLASS_TABLE[c] for c in range(30)}
    synthetic.write_dataset(root, {c: 10 for c in range(30)}, 56, 56, seed=5, class_table=table)
    return root


_CRITERIA = []


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's verdict for the end-of-run summary."""
    entry = {}

    def declare(number, text):
        entry.update(number=number, text=text)

    yield declare
    rep = getattr(request.node, "rep_call", None)
    passed = rep is not None and rep.passed
    line = f"{'PASS' if passed else 'FAIL'} criterion {entry.get('number', '?')}: {entry.get('text', request.node.name)}"
    _CRITERIA.append((entry.get("number", 0), line))
    print(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA):
            terminalreporter.write_line(line)

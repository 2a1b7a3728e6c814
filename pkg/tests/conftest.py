import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# -- acceptance summary ------------------------------------------------------------

_criteria: dict = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    n = mark.args[0]
    ok = call.excinfo is None
    prev = _criteria.get(n, (True, []))
    if call.when == "setup" and ok:
        _criteria.setdefault(n, prev)
        return
    detail = prev[1] + [p[1] for p in getattr(item, "user_properties", []) if p[0] == "detail"]
    _criteria[n] = (prev[0] and ok, detail if ok else detail + [f"{item.name} failed"])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok, detail = _criteria[n]
        extra = ("  " + "; ".join(dict.fromkeys(detail))) if detail else ""
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}{extra}")

import numpy as np
import pytest

from pir.pipeline import backbone_forecasts, prepare
from pir.synthetic import SynthConfig, generate_synthetic_benchmark


@pytest.fixture(scope="session")
def small_data():
    """A short 3-channel motif series cut into 24-in / 12-out windows."""
    cfg = SynthConfig(length=1500, motif_rate=0.05, min_train_occurrences=1)
    ds = generate_synthetic_benchmark(cfg, seed=1).dataset
    return prepare(ds, (7, 1, 2), 24, 12)


@pytest.fixture(scope="session")
def small_run(small_data):
    return backbone_forecasts(small_data, "seasonal", period=24)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion, worst outcome of its tests wins

_criteria: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    marks = dict(report.user_properties).get("criterion")
    if marks is None or (report.when != "call" and not report.failed):
        return
    number, title = marks
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "notes": []})
    entry["ok"] &= report.passed
    entry["notes"] += [f"{k}={v}" for k, v in report.user_properties if k != "criterion"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        notes = f"  ({', '.join(e['notes'])})" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {number}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}{notes}")


@pytest.fixture(autouse=True)
def _criterion_property(request):
    mark = request.node.get_closest_marker("criterion")
    if mark is not None:
        request.node.user_properties.append(("criterion", tuple(mark.args)))

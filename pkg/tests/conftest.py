import numpy as np
import pytest

from defaultlab.data import FeatureSchema, ObservationTable


def make_table(rows, labels=None, quarter=None, current=None, names=None, extra=None):
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    n, d = rows.shape
    names = names or [f"f{j}" for j in range(d)]
    schema = FeatureSchema(names, ["continuous"] * d)
    return ObservationTable(
        schema=schema,
        rows=rows,
        labels=np.zeros(n, dtype=int) if labels is None else labels,
        quarter=np.zeros(n, dtype=int) if quarter is None else quarter,
        borrower_id=np.arange(n),
        current_flag=np.ones(n, dtype=bool) if current is None else current,
        extra=extra or {},
    )


@pytest.fixture
def table_factory():
    return make_table


# -- acceptance report -------------------------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown":
        return
    if report.when == "setup" and report.passed:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _criteria[marker.args[0]] = (marker.args[1], report.passed, report.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        title, ok, seconds, detail = _criteria[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title} ({seconds:.1f}s)"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))

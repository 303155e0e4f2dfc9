import pytest

from mmgc import data as D
from mmgc import tensor as T
from mmgc.report_encoder import build_vocab


@pytest.fixture
def f64():
    with T.precision("f64"):
        yield


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """n=200 generated dataset on disk (default generator settings otherwise)."""
    root = tmp_path_factory.mktemp("small")
    params = D.GenParams(n_samples=200)
    samples = D.generate(params)
    parts = D.split([s.id for s in samples], 1, strata=D.split_strata(samples))
    D.save_dataset(samples, parts, root, build_vocab([s.report for s in samples]))
    return root


# --- acceptance reporting -----------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}
_NOTES: dict[int, list[str]] = {}


@pytest.fixture
def note(request):
    """Attach a measured value to the summary line of the test's acceptance criterion."""
    number = request.node.get_closest_marker("criterion").args[0]
    return lambda text: _NOTES.setdefault(number, []).append(text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed
    if report.when == "call" or failed or report.skipped:
        previous = _ACCEPTANCE.get(number, (title, "PASS"))[1]
        status = "FAIL" if failed or previous == "FAIL" else ("SKIP" if report.skipped else "PASS")
        _ACCEPTANCE[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
        for text in _NOTES.get(number, []):
            terminalreporter.write_line(f"    {text}")

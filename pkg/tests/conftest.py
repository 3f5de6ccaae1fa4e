import pytest

from gorqat.data import blobs
from gorqat.models import TeacherEnsemble
from gorqat.trainer import train_teacher

BLOB_SIGMA = 0.45


_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    verdict = "PASS" if report.outcome == "passed" else "FAIL"
    _criteria[props["criterion"]] = (verdict, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        verdict, title, detail = _criteria[number]
        line = f"[{verdict}] criterion {number}: {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))


@pytest.fixture(scope="session")
def blob_data():
    return blobs(k=2, n=2000, sigma=BLOB_SIGMA, seed=7)


@pytest.fixture(scope="session")
def teacher(blob_data):
    return train_teacher([2, 64, 64, 2], blob_data, seed=0, epochs=20)


@pytest.fixture(scope="session")
def single_teacher(teacher):
    return TeacherEnsemble([teacher])


@pytest.fixture(scope="session")
def small_data():
    return blobs(k=2, n=300, sigma=BLOB_SIGMA, seed=3)

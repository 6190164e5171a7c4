import pytest

from ergoflow.coeffs import make_model, validate_recurrence
from ergoflow.measures import build_measures

CATALOG_NAMES = ("ou", "double_well", "tanh_drift")


@pytest.fixture(scope="session")
def models():
    return {name: validate_recurrence(make_model(name))[0] for name in CATALOG_NAMES}


@pytest.fixture(scope="session")
def tables(models):
    return {name: build_measures(m) for name, m in models.items()}


@pytest.fixture(scope="session")
def ou(models):
    return models["ou"]


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and fails the test when ``ok`` is false."""

    def record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        assert ok, f"criterion {n}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

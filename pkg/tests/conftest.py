import pytest

from gridsec.grid_model import bundled_case


@pytest.fixture(scope="session")
def case2():
    return bundled_case("case2")


@pytest.fixture(scope="session")
def case3():
    return bundled_case("case3")


@pytest.fixture(scope="session")
def case5():
    return bundled_case("case5")


@pytest.fixture(scope="session")
def rts24():
    return bundled_case("rts24")


_ACCEPTANCE: list[str] = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _ACCEPTANCE.extend(v for k, v in report.user_properties if k == "acceptance")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)

import pytest

from lmmpf.bench import generate_data, metabolic_problem


@pytest.fixture(scope="session")
def metabolic_data(tmp_path_factory):
    """Default metabolic observations (seed 7) and the problem they came from."""
    prob = metabolic_problem()
    path = tmp_path_factory.mktemp("data") / "metabolic.csv"
    return prob, generate_data(prob, seed=7, path=path)


_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome; all outcomes are listed at the end of the run."""

    def record(label, passed, detail=""):
        status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
        line = f"criterion {label}: {status}  {detail}".rstrip()
        _CRITERIA.append(line)
        print(line)
        return passed

    return record


def _order(line):
    label = line.split(":")[0].split()[-1]
    digits = "".join(ch for ch in label if ch.isdigit())
    return int(digits or 0), label


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=_order):
            terminalreporter.write_line(line)

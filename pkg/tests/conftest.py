import pytest
from hypothesis import settings

from fbpfusion.data import SyntheticSpec
from fbpfusion.experiments import desk_config, synthetic_samples, train_and_evaluate

settings.register_profile("default", deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def desk_data():
    spec = SyntheticSpec()
    return spec, synthetic_samples(spec, "train"), synthetic_samples(spec, "test")


@pytest.fixture(scope="session")
def trained_fbp(desk_data):
    """FBP model trained at desk settings on the default synthetic data (seed 0)."""
    _, train_set, test_set = desk_data
    return train_and_evaluate(train_set, test_set, desk_config(0))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    def report(number, passed, detail):
        line = f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)

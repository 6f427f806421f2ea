import pytest

from kpopt.datagen import generate_dataset
from kpopt.kinematics import load_robot
from kpopt.scenario import data_path, load_scenario


@pytest.fixture(scope="session")
def planar():
    return load_robot(data_path("planar_2link.json"))


@pytest.fixture(scope="session")
def tool_scenario():
    return load_scenario(data_path("tool_scenario.json"))


@pytest.fixture(scope="session")
def planted_scenario():
    return load_scenario(data_path("tool_planted_scenario.json"))


@pytest.fixture(scope="session")
def small_tool_dataset(tool_scenario):
    sc = tool_scenario
    return generate_dataset(sc.chain, sc.camera, sc.candidates, sc.randomization, 60, 40, 11)



ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one pass/fail line for the acceptance summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def emit(number, name, passed, detail):
        lines.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number} {name}: {detail}")
        return passed

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)

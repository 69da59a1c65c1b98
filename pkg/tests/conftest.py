import numpy as np
import pytest

from rcmlab.model import AdjacencySpec, ModelSpec, Reach, WeightDistribution

# criterion number -> (passed, detail); filled by the acceptance suite
CRITERIA: dict = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def gilbert():
    return ModelSpec(AdjacencySpec("gilbert", 2, {"radius": 1.0}), intensity=0.5, box=3.0)


@pytest.fixture
def smooth():
    return ModelSpec(AdjacencySpec("exp_power", 2, {"beta": 3.0, "scale": 1.0}),
                     intensity=1.0, box=5.0)


@pytest.fixture
def min_reach():
    return ModelSpec(AdjacencySpec("min_reach", 2, {"beta": 3.0}, Reach("linear", 1.0)),
                     WeightDistribution.pareto(4.5, 10.0), intensity=1.0, box=5.0)


@pytest.fixture
def gen():
    return np.random.default_rng(12345)

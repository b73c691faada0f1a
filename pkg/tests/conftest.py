import numpy as np
import pytest
from hypothesis import settings

from partsup import synthgen
from partsup.evaluator import TaskData

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=60)
settings.load_profile("repo")


def tiny_specs(shapes=6, points=128):
    return synthgen.default_primitive_specs(shapes_count=shapes, points_per_shape=points)


@pytest.fixture(scope="session")
def tiny_dataset():
    return synthgen.gen_primitive_dataset(tiny_specs(), seed=3)


@pytest.fixture(scope="session")
def tiny_data(tiny_dataset):
    return TaskData(tiny_dataset, n_samples=16, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    def _record(n: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(passed), detail)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

# generation settings of fixtures/task0.csv
FIXTURE_SPEC = dict(n_tasks=1, classes_per_task=4, d_in=8, samples_per_class_train=3,
                    samples_per_class_test=2, seed=1)


@pytest.fixture
def fixture_dir() -> Path:
    return FIXTURES

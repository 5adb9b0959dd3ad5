import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from sepal.GlobalLogger import GlobalLogger  # noqa: E402
from sepal.data import SyntheticParams, generate_synthetic  # noqa: E402
from sepal.harness import LearnerSettings, Schedule  # noqa: E402


@pytest.fixture(autouse=True)
def fresh_memory_logs():
    GlobalLogger.get_instance().clear_memory_logs()
    yield
    GlobalLogger.get_instance().set_run_id(None)


@pytest.fixture
def tiny_params():
    return SyntheticParams(n_classes=3, n_features=4, height=4, width=4, n_train=40, n_eval=12,
                           blob_size=(2, 2), labels_per_sample=(1, 2), seed=7)


@pytest.fixture
def tiny_dataset(tiny_params):
    return generate_synthetic(tiny_params)


@pytest.fixture
def tiny_schedule():
    return Schedule(initial_size=8, adds=(6, 6), epochs=(4, 3, 3), trials=1)


@pytest.fixture
def learner():
    return LearnerSettings(batch_size=8)

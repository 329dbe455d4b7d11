from pathlib import Path

import pytest

from drift.fetch import ensure_movielens_100k
from drift.harness import RunConfig, prepare_data, run_baseline, run_drift

ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture(scope="session")
def ml100k_paths():
    try:
        return ensure_movielens_100k(ROOT / "data" / "ml-100k")
    except Exception as exc:  # network, pip or archive layout
        pytest.fail(f"MovieLens-100k unavailable ({exc}); run drift-fetch-ml100k or set DRIFT_ML100K")


@pytest.fixture(scope="session")
def ml_config(ml100k_paths):
    data, items = ml100k_paths
    return RunConfig(dataset=str(data), items=str(items), epochs=5)


@pytest.fixture(scope="session")
def ml_data(ml_config):
    return prepare_data(ml_config)


@pytest.fixture(scope="session")
def ml_runs(ml_config, ml_data):
    """Default-config DRIFT and baseline runs, 5 epochs each, computed once."""
    return {
        "drift": run_drift(ml_config, ml_data),
        "baseline": run_baseline(ml_config, ml_data),
    }

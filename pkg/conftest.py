import os
import sys
import importlib
import pytest

PROJECT_ROOT = os.path.abspath(os.path.dirname(__file__))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

FIXTURES = os.path.join(PROJECT_ROOT, "test", "fixtures")

from config import RunConfig, with_engine  # noqa: E402
from plugins import BUILTIN_SYNTHETIC, synthetic_pool  # noqa: E402


@pytest.fixture
def runs_root(tmp_path):
    root = tmp_path / "runs"
    root.mkdir()
    yield root


@pytest.fixture
def pool():
    return synthetic_pool(200)


@pytest.fixture
def small_config():
    """Synthetic run small enough for unit tests: a handful of iterations."""
    return with_engine(RunConfig(), budget=300, sample_size=10, rng_seed=3)


@pytest.fixture
def finished_run(runs_root, small_config):
    """A completed synthetic run stored under runs_root/demo."""
    run_service = importlib.import_module("run_service")
    run_dir = runs_root / "demo"
    result = run_service.launch_run(run_dir, small_config, "builtin:synthetic:200",
                                     BUILTIN_SYNTHETIC, BUILTIN_SYNTHETIC)
    return run_dir, result


@pytest.fixture
def client(runs_root):
    app = importlib.import_module("app").create_app(runs_root)
    with app.test_client() as c:
        yield c

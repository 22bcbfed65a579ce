import numpy as np
import pytest
from threadpoolctl import threadpool_limits


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session", autouse=True)
def single_thread_blas():
    # latency numbers and bit-level reproducibility assume one BLAS thread
    with threadpool_limits(1):
        yield


def tiny_settings(**over):
    """Settings small enough to train a full bundle in seconds."""
    from diffcard.config import Settings

    s = Settings()
    s.gmm.components, s.gmm.iterations = 16, 30
    s.schedule.epsilon = "0.003125"
    s.score.epochs, s.score.steps_per_epoch, s.score.batch_size = 2, 40, 128
    s.score.head_hidden, s.score.tail_hidden = "24,24", "16"
    s.estimate.samples = 32
    s.estimate.histogram_bins = 64
    s.tree.queries = 400
    for key, value in over.items():
        sec, name = key.split("__")
        setattr(getattr(s, sec), name, value)
    return s


@pytest.fixture(scope="session")
def tiny_table():
    from diffcard.workload import gen_forest_like

    return gen_forest_like(1500, seed=3)[:, :4]


@pytest.fixture(scope="session")
def tiny_bundle(tiny_table):
    from diffcard.pipeline import build_bundle

    return build_bundle(tiny_table, tiny_settings())


@pytest.fixture(scope="session")
def functional_bundle():
    from diffcard.pipeline import build_bundle
    from diffcard.workload import gen_near_functional

    return build_bundle(gen_near_functional(2000, seed=1), tiny_settings())


ACCEPTANCE_LINES = {}


def record_criterion(number: int, ok: bool, detail: str):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])

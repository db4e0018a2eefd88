import json
import time
from pathlib import Path

import numpy as np
import pytest

from daimon.embedding import DelTrainConfig, LabelVector, train_del

DATA = Path(__file__).parent / "data"

DESK_M, DESK_N, DESK_C = 1000, 64, 10
DESK_SEED = 7


@pytest.fixture(scope="session")
def oracles():
    return json.loads((DATA / "oracles.json").read_text())


@pytest.fixture(scope="session")
def desk_del():
    """Desk-scale embedding (m=1000, n=64, C=10, hidden=256), trained once."""
    x_t = LabelVector.random(DESK_M, DESK_C, np.random.default_rng(DESK_SEED))
    t0 = time.perf_counter()
    model, trace = train_del(x_t, DESK_N, DelTrainConfig(seed=DESK_SEED))
    return {"model": model, "trace": trace, "x_t": x_t, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def small_del():
    """Small embedding for protocol tests where accuracy does not matter much."""
    x_t = LabelVector.random(200, 10, np.random.default_rng(3))
    model, trace = train_del(x_t, 16, DelTrainConfig(hidden=64, epochs=40, seed=3))
    return {"model": model, "trace": trace, "x_t": x_t}


# --- acceptance reporting ----------------------------------------------------

ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_trace():
    """The default five-period scenario, run once for the acceptance suite."""
    from daimon.sim import default_scenario, run_scenario

    t0 = time.perf_counter()
    trace = run_scenario(default_scenario())
    return {"trace": trace, "seconds": time.perf_counter() - t0}

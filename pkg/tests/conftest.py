import time
from types import SimpleNamespace

import numpy as np
import pytest

from hybridbnn import data, nn, train

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def small_spec():
    return nn.ModelSpec(side=8, channels=(2, 2, 2))


@pytest.fixture
def small_model(small_spec):
    params = nn.init_params(small_spec, seed=3)
    x = np.random.default_rng(0).uniform(0, 1, (1, 1, 8, 8, 8)).astype(np.float32)
    return small_spec, params, x


def _pipeline(hard_fraction):
    start = time.perf_counter()
    vols = data.generate(data.GenConfig(seed=1, hard_fraction=hard_fraction))
    vols, _ = data.normalize_global(vols)
    tr, te = data.split(vols, 0.8, seed=1)
    cfg = train.TrainConfig(seed=1)
    x, y = data.stack(tr)
    params, history = train.fit(cfg, x, y)
    return SimpleNamespace(spec=cfg.spec, params=params, train=tr, test=te, history=history,
                           seconds=time.perf_counter() - start)


@pytest.fixture(scope="session")
def default_run():
    """Default synthetic cohort (S=32, 376 samples, seed 1) and trained model."""
    return _pipeline(0.0)


@pytest.fixture(scope="session")
def noisy_run():
    """Same, with 10% hard samples whose label the image does not determine."""
    return _pipeline(0.1)


@pytest.fixture
def acceptance(request):
    """Record one verdict line per acceptance criterion, then assert it."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number, checks):
        ok = all(passed for _, passed in checks)
        failed = [name for name, passed in checks if not passed]
        detail = "; ".join(name for name, _ in checks) if ok else "failed: " + "; ".join(failed)
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        results[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 10):
        terminalreporter.write_line(results.get(number, f"criterion {number}: NOT RUN (errored or deselected)"))

import numpy as np
import pytest

from groupthink.model import ModelConfig, init_model
from groupthink.tokenizer import ByteTokenizer

CRITERIA = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def small_model():
    return init_model(ModelConfig(num_layers=2, num_heads=2, head_dim=8, seed=11))


@pytest.fixture(scope="session")
def tokenizer():
    return ByteTokenizer()


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    number, title = marker.args
    results = item.config.stash.setdefault(CRITERIA, {})
    if rep.when == "call" or number not in results:
        results[number] = (rep.passed, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, title = results[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {title}")


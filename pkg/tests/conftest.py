import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    from stg_avatar import synth
    return synth.generate(seed=0, frames=8, height=32, width=32)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_dataset):
    from stg_avatar.synth import write_dataset
    out = tmp_path_factory.mktemp("tiny_ds")
    write_dataset(tiny_dataset, out)
    return out


CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for the end-of-run summary, then assert."""
    def record(label, ok, detail):
        line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash.setdefault(CRITERIA, []).append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

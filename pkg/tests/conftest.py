import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from palora.experiments import TransferConfig, build_transfer  # noqa: E402
from palora.model import PretrainConfig, TaskSpec, make_dataset, pretrain  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_model():
    """A 3-layer relu MLP pretrained on an 8-d, 3-class mixture."""
    spec = TaskSpec("gaussian_mixture", classes=3, input_dim=8, noise=0.7, seed=3)
    model, acc = pretrain(spec, [12, 10], PretrainConfig(epochs=20, train_per_class=60, test_per_class=60))
    return model


@pytest.fixture(scope="session")
def small_data(small_model):
    spec = TaskSpec("rotated_mixture", classes=3, input_dim=8, noise=0.7, seed=3, rotation=0.4, relabel=0)
    return make_dataset(spec, 20, seed=5)


@pytest.fixture(scope="session")
def transfer():
    return build_transfer(TransferConfig())


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    from contextlib import contextmanager

    log = request.config.stash.setdefault(_ACCEPTANCE, {})

    @contextmanager
    def check(number: int, title: str):
        note = {"detail": ""}
        ok = False
        try:
            yield note
            ok = True
        finally:
            line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
            if note["detail"]:
                line += f"  [{note['detail']}]"
            log[number] = line
            print(line)

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE, {})
    if log:
        terminalreporter.section("acceptance criteria")
        for n in sorted(log):
            terminalreporter.write_line(log[n])

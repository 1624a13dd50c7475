import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ovseg.ndtensor import Tape, Tensor
from ovseg.toydata import write_toy_workspace

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def fd_check(fn, *arrays, h=1e-6):
    """Max relative error between tape gradients and central differences of ``fn``."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*leaves)
    tape.backward(loss)
    worst = 0.0
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn(*[Tensor(x.data) for x in leaves]).item()
            flat[i] = old - h
            down = fn(*[Tensor(x.data) for x in leaves]).item()
            flat[i] = old
            num = (up - down) / (2 * h)
            ana = leaf.grad.reshape(-1)[i]
            worst = max(worst, abs(ana - num) / (abs(num) + 1e-8))
    return worst


@pytest.fixture(scope="session")
def toy_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    write_toy_workspace(root, 0)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    if module is None or not module.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.VERDICTS:
        terminalreporter.write_line(line)

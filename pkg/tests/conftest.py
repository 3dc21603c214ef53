import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cdt4rec import tensor as T
from cdt4rec.gradcheck import numeric_gradient, relative_error

settings.register_profile("default", deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tape_grads(fn, *arrays):
    """Run ``fn`` on leaf tensors under a tape; return (loss, grads)."""
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.GradTape() as tape:
        loss = fn(*leaves)
    tape.backward(loss)
    return loss.item(), [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def fd_grads(fn, *arrays, h=1e-6):
    arrays = [np.array(a, dtype=float) for a in arrays]
    out = []
    for x in arrays:
        out.append(numeric_gradient(lambda: fn(*[T.Tensor(a) for a in arrays]).item(), x, h))
    return out


def assert_grads_match(fn, *arrays, tol=1e-5, h=1e-6):
    _, analytic = tape_grads(fn, *arrays)
    numeric = fd_grads(fn, *arrays, h=h)
    for a, n in zip(analytic, numeric):
        err = relative_error(a, n, floor=1e-4).max(initial=0.0)
        assert err < tol, f"max relative error {err}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

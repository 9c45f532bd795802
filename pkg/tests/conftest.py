import numpy as np
import pytest

from ddian import autodiff as ad


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of the scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = f()
            arr[idx] = old - h
            down = f()
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    diff = np.linalg.norm(np.asarray(a) - np.asarray(b))
    return diff if scale < 1e-10 else diff / scale


def check_grads(build, leaves, tol, h=1e-5):
    """Backprop ``build()`` and compare every leaf gradient to central differences."""
    for t in leaves:
        t.zero_grad()
    ad.backward(build())
    got = [t.grad.copy() for t in leaves]
    want = numeric_grad(lambda: build().item(), [t.values for t in leaves], h)
    errs = [rel_err(a, b) for a, b in zip(got, want)]
    assert max(errs) < tol, errs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_acceptance_key = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_acceptance_key] = []


@pytest.fixture
def acceptance(request):
    """Record the verdict of one acceptance criterion for the end-of-run summary."""
    results = request.config.stash[_acceptance_key]

    def record(name, passed, detail=""):
        results.append((name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_acceptance_key, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in results:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")

import numpy as np
import pytest

from samil.diffcore import tensor as tn


def finite_difference(loss_fn, params, step=1e-5):
    """Central differences of ``loss_fn()`` with respect to every entry of ``params``.

    ``params`` maps names to tensors whose ``.data`` is perturbed in place.
    Independent of the autodiff path: only forward values are used.
    """
    grads = {}
    for name, t in params.items():
        g = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = float(loss_fn().data)
            flat[i] = old - step
            down = float(loss_fn().data)
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def analytic(loss_fn, params):
    for t in params.values():
        t.grad = None
    tn.backward(loss_fn())
    return {k: np.array(t.grad) for k, t in params.items()}


def max_relative_error(loss_fn, params, floor=1e-8):
    """Largest element-wise relative error over entries with |gradient| > floor."""
    a = analytic(loss_fn, params)
    n = finite_difference(loss_fn, params)
    worst = 0.0
    for k in params:
        mask = np.abs(a[k]) > floor
        if mask.any():
            rel = np.abs(a[k] - n[k])[mask] / np.maximum(np.abs(a[k]), np.abs(n[k]))[mask]
            worst = max(worst, float(rel.max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)

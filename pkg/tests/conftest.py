"""Shared helpers: a central finite-difference gradient oracle and fixtures."""

import numpy as np
import pytest

from hdcgan.tensor import Tensor

FD_STEP = 1e-6
# ops that are linear in each input have no truncation error at any step, so
# a larger step only shrinks the roundoff term eps*|f|/h
LINEAR_FD_STEP = 1e-2
# relative error uses max(|analytic|, |numeric|, REL_FLOOR) as denominator so
# entries that are ~0 in both routes compare on an absolute scale
REL_FLOOR = 1e-3


def numeric_grad(f, arrays, h=FD_STEP):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every input entry."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = a[i]
            a[i] = orig + h
            up = f(*arrays)
            a[i] = orig - h
            down = f(*arrays)
            a[i] = orig
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(build, arrays):
    ts = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    build(*ts).backward()
    return [t.grad for t in ts]


def max_rel_err(a, n, floor=REL_FLOOR):
    a, n = np.asarray(a), np.asarray(n)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def gradcheck(build, arrays, tol=1e-4, h=FD_STEP):
    """Return the worst elementwise relative error between the two routes.

    ``build`` maps Tensors to a scalar Tensor. Asserts the error is < tol.
    """
    def f(*arrs):
        return build(*[Tensor(a, dtype=np.float64) for a in arrs]).item()

    ana = analytic_grad(build, arrays)
    num = numeric_grad(f, arrays, h)
    worst = max(max_rel_err(a, n) for a, n in zip(ana, num))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol}"
    return worst


def weighted_sum(t, weights):
    """Scalar probe <t, weights> so every output entry gets a distinct upstream grad."""
    return (t * Tensor(weights, dtype=np.float64)).sum()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance reporting ------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)

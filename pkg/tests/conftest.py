import numpy as np
import pytest

from lenslesskit import tensor as T


def numeric_grad(f, t, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``t.data``."""
    g = np.zeros_like(t.data)
    it = np.nditer(t.data, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = t.data[i]
        t.data[i] = old + h
        fp = f()
        t.data[i] = old - h
        fm = f()
        t.data[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def normwise_error(num, ana):
    """``max|num - ana| / max|num|``.

    Entrywise relative errors blow up on gradients that are zero up to
    round-off, so the comparison is scaled by the largest entry.
    """
    scale = max(np.abs(num).max(), 1e-12)
    return float(np.abs(num - ana).max() / scale)


def gradcheck(build, tensors, h=1e-6):
    """Return the worst normwise error between tape and finite-difference gradients.

    ``build()`` must return a scalar Tensor computed from ``tensors``.
    """
    with T.Tape() as tape:
        loss = build()
    ana = tape.backward(loss, tensors)

    def value():
        return float(build().data)

    return max(normwise_error(numeric_grad(value, t, h), ana[t]) for t in tensors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE = {}


@pytest.fixture
def verdict(request):
    """``verdict(criterion, part, ok, detail)`` records one check and returns ``ok``."""

    def record(criterion, part, ok, detail=""):
        ACCEPTANCE.setdefault(criterion, []).append((part, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} [{criterion}] {part}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE, key=lambda c: int(c)):
        parts = ACCEPTANCE[crit]
        ok = all(p[1] for p in parts)
        failed = [p[0] for p in parts if not p[1]]
        detail = "; ".join(f"{p[0]}: {p[2]}" for p in parts)
        line = f"{'PASS' if ok else 'FAIL'} criterion {crit}"
        if failed:
            line += f" (failing: {', '.join(failed)})"
        terminalreporter.write_line(f"{line} | {detail}")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uotscreen import ProblemSpec

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_spec(rng, n=None, m=None, lam=None, penalty="l2", epsilon=0.0, low=0.2):
    """Random instance with marginals bounded away from zero."""
    n = int(rng.integers(2, 9)) if n is None else n
    m = int(rng.integers(2, 9)) if m is None else m
    lam = float(rng.choice([1.0, 0.1, 0.01])) if lam is None else lam
    a = rng.uniform(low, 1.5, n) / n
    b = rng.uniform(low, 1.5, m) / m
    c = rng.uniform(0.0, 1.0, n * m)
    return ProblemSpec(a, b, c, lam, penalty, epsilon)


def dense_X(n, m):
    X = np.zeros((n + m, n * m))
    for i in range(n):
        for j in range(m):
            X[i, i * m + j] = 1.0
            X[n + j, i * m + j] = 1.0
    return X


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit_spec():
    """1x1 instance with lam=1, c=2, a=b=1 (optimum t=0, P=1)."""
    return ProblemSpec([1.0], [1.0], [2.0], 1.0, "l2")


def screening_events(spec, method, solver=None, max_iters=3000, gap_tol=1e-11, period=10, seed=0):
    """Run with screening and return (result, list of events seen by the callback)."""
    from uotscreen import SolverConfig, run_with_screening
    solver = solver or ("fista" if spec.penalty.value == "l2" else "mm")
    events = []
    cfg = SolverConfig(solver, max_iters=max_iters, gap_tol=gap_tol, screen_period=period,
                       screen_method=method, seed=seed)
    res = run_with_screening(spec, cfg, callback=events.append)
    return res, events


_REF_CACHE = {}


def reference(spec):
    """Cached certified optimum keyed on the instance data."""
    from uotscreen.oracle import reference_solve
    key = (spec.a.tobytes(), spec.b.tobytes(), spec.c.tobytes(), spec.lam, spec.penalty, spec.epsilon)
    if key not in _REF_CACHE:
        _REF_CACHE[key] = reference_solve(spec)
    return _REF_CACHE[key]


ACCEPTANCE = {}


def record(criterion: int, name: str, ok: bool, detail: str) -> str:
    """Store and return the one-line verdict for an acceptance criterion."""
    line = f"CRITERION {criterion:2d} [{name}]: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uotscreen import (DegenerateError, Penalty, ProblemSpec, ScreeningState, SolverConfig,
                       UnsupportedError, primal_objective, run_with_screening)
from uotscreen.oracle import dense_primal, true_support
from uotscreen.screening import SUPPORTED
from uotscreen.solvers import (SOLVER_PENALTIES, Iterate, cd_step, certificate, check_solver,
                               default_stepsize, fista_step, initial_plan, mm_step)

from conftest import dense_X, random_spec, reference


def _run(spec, kind, method="none", **kw):
    return run_with_screening(spec, SolverConfig(kind, screen_method=method, **kw))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"kind": "bfgs"}, {"gap_tol": 0.0}, {"screen_period": 0},
                                    {"max_iters": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)

    def test_defaults(self):
        cfg = SolverConfig()
        assert cfg.screen_period == 10 and cfg.stepsize is None

    def test_unsupported_solver_penalty(self):
        with pytest.raises(UnsupportedError):
            check_solver("fista", "kl")
        with pytest.raises(UnsupportedError):
            check_solver("cd", "kl")
        assert SOLVER_PENALTIES["mm"] >= SOLVER_PENALTIES["fista"]

    def test_unsupported_method_before_iterating(self):
        spec = random_spec(np.random.default_rng(0), 3, 3, penalty="kl")
        with pytest.raises(UnsupportedError):
            _run(spec, "mm", "sa-ctp")
        with pytest.raises(UnsupportedError):
            _run(spec.replace(penalty="l2"), "fista", "ell")

    def test_bad_start(self, unit_spec):
        with pytest.raises(ValueError):
            run_with_screening(unit_spec, SolverConfig(), t0=[-1.0])


def test_default_stepsize():
    spec = random_spec(np.random.default_rng(0), 3, 3)
    assert default_stepsize(spec) == pytest.approx(1 / 6)


def test_initial_plan_positive(rng):
    spec = random_spec(rng, 4, 5)
    t0 = initial_plan(spec)
    assert t0.shape == (20,) and np.all(t0 > 0)


@given(st.integers(0, 2**32 - 1))
def test_smoothness_constant(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    X = dense_X(n, m)
    y = rng.random(n + m)

    def H(t):
        return 0.5 * float(np.sum((X @ t - y) ** 2))

    for _ in range(20):
        t, d = rng.normal(size=n * m), rng.normal(size=n * m) * rng.uniform(0.01, 10)
        grad = X.T @ (X @ t - y)
        assert H(t + d) <= H(t) + grad @ d + 0.5 * (n + m) * (d @ d) + 1e-9 * (1 + H(t + d))


def test_smoothness_constant_is_tight():
    # The all-ones direction attains ||X d||^2 = (n+m) ||d||^2.
    n, m = 3, 4
    X = dense_X(n, m)
    d = np.ones(n * m)
    assert np.sum((X @ d) ** 2) == pytest.approx((n + m) * (d @ d))


class TestFista:
    def test_unit_instance(self, unit_spec):
        res = _run(unit_spec, "fista", max_iters=200, gap_tol=1e-10, screen_period=1)
        assert res.converged and res.n_iter <= 200
        assert res.t[0] == pytest.approx(0.0, abs=1e-10)

    def test_fixed_point(self, unit_spec):
        state = ScreeningState(1, 1)
        it = fista_step(Iterate(np.zeros(1)), unit_spec, state)
        assert np.all(np.abs(it.t) <= 1e-14)

    def test_near_fixed_point_random(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            spec = random_spec(rng, penalty="l2")
            ref = reference(spec)
            it = fista_step(Iterate(ref.t), spec, ScreeningState(spec.n, spec.m))
            assert np.max(np.abs(it.t - ref.t)) <= 1e-10

    def test_kl_rejected(self, unit_spec):
        with pytest.raises(UnsupportedError):
            fista_step(Iterate(np.ones(1)), unit_spec.replace(penalty="kl"), ScreeningState(1, 1))

    def test_reaches_tolerance(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            spec = random_spec(rng, penalty="l2")
            res = _run(spec, "fista", max_iters=100_000, gap_tol=1e-10)
            assert res.converged and res.gap <= 1e-10


class TestMM:
    @pytest.mark.parametrize("penalty", ["l2", "kl"])
    def test_monotone(self, penalty):
        rng = np.random.default_rng(5)
        for _ in range(20):
            spec = random_spec(rng, penalty=penalty)
            state = ScreeningState(spec.n, spec.m)
            it = Iterate(initial_plan(spec) * rng.uniform(0.2, 3.0))
            prev = primal_objective(it.t, spec, state)
            for _ in range(50):
                it = mm_step(it, spec, state)
                cur = primal_objective(it.t, spec, state)
                assert cur <= prev + 1e-13 * (1 + abs(prev))
                prev = cur

    def test_kl_heavy_cost_goes_to_zero(self):
        spec = ProblemSpec([1.0], [1.0], [1.0], 50.0, "kl")
        res = _run(spec, "mm", max_iters=200, gap_tol=1e-12, screen_period=1)
        # Stationarity lam c + 2 log t = 0 puts the optimum at exp(-25).
        assert res.t[0] == pytest.approx(math.exp(-25.0), rel=1e-9)

    @pytest.mark.parametrize("penalty", ["l2", "kl"])
    def test_fixed_point_at_optimum(self, penalty):
        rng = np.random.default_rng(6)
        for _ in range(5):
            spec = random_spec(rng, penalty=penalty)
            ref = reference(spec)
            it = mm_step(Iterate(ref.t), spec, ScreeningState(spec.n, spec.m))
            assert np.max(np.abs(it.t - ref.t)) <= 1e-10

    def test_kl_zero_marginal(self):
        # ProblemSpec rejects this instance; the step guards it independently.
        spec = ProblemSpec([1.0, 0.0], [1.0], [1.0, 1.0], 1.0, "l2")
        object.__setattr__(spec, "penalty", Penalty.KL)
        with pytest.raises(DegenerateError):
            mm_step(Iterate(np.ones(2)), spec, ScreeningState(2, 1))


class TestCD:
    def test_unit_instance_one_pass(self, unit_spec):
        it = cd_step(Iterate(np.array([3.0])), unit_spec, ScreeningState(1, 1))
        assert it.t[0] == 0.0

    def test_monotone(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            spec = random_spec(rng, penalty="l2")
            state = ScreeningState(spec.n, spec.m)
            it = Iterate(initial_plan(spec))
            prev = primal_objective(it.t, spec, state)
            for _ in range(30):
                it = cd_step(it, spec, state)
                cur = primal_objective(it.t, spec, state)
                assert cur <= prev + 1e-14 * (1 + abs(prev))
                prev = cur

    @given(st.integers(0, 2**32 - 1))
    def test_first_update_is_exact_minimizer(self, seed):
        # The first coordinate of a pass is updated with all others frozen.
        rng = np.random.default_rng(seed)
        spec = random_spec(rng, 3, 4, penalty="l2")
        X = dense_X(3, 4)
        t = rng.random(12) * 0.3
        new = cd_step(Iterate(t), spec, ScreeningState(3, 4)).t[0]
        grid = np.concatenate([np.linspace(0, 2, 2001), [new]])
        vals = [dense_primal(np.concatenate([[g], t[1:]]), spec, X) for g in grid]
        assert vals[-1] <= min(vals) + 1e-14

    def test_agrees_with_fista(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            spec = random_spec(rng, penalty="l2")
            a = _run(spec, "cd", max_iters=100_000, gap_tol=1e-9)
            b = _run(spec, "fista", max_iters=100_000, gap_tol=1e-9)
            assert a.converged and b.converged
            assert abs(a.trace[-1].primal - b.trace[-1].primal) <= 1e-8


class TestRunWithScreening:
    def test_baseline_never_screens(self, rng):
        spec = random_spec(rng, 5, 5)
        res = _run(spec, "fista", max_iters=500)
        assert all(row.screened == 0 for row in res.trace)

    def test_trace_shape(self, rng):
        spec = random_spec(rng, 4, 4, 0.1)
        res = _run(spec, "fista", "sa-ctp", max_iters=300, gap_tol=1e-14, screen_period=10)
        assert [row.iter for row in res.trace] == list(range(0, 301, 10))
        assert res.t.shape == (16,) and np.all(res.t[~res.state.mask] == 0)
        times = [row.elapsed_ns for row in res.trace]
        assert times == sorted(times)

    def test_certificate_is_feasible(self, rng):
        spec = random_spec(rng, 4, 3)
        state = ScreeningState(4, 3)
        cert = certificate(rng.random(12), spec, state, "shift+")
        assert cert.gap >= -1e-14

    @pytest.mark.parametrize("restart", [False, True])
    def test_restart_option_converges(self, restart):
        spec = random_spec(np.random.default_rng(9), 6, 6, 0.1)
        res = run_with_screening(spec, SolverConfig("fista", max_iters=50_000, gap_tol=1e-9,
                                                    screen_method="sa-ctp",
                                                    restart_on_compaction=restart))
        assert res.converged

    @pytest.mark.parametrize("penalty,solver", [("l2", "fista"), ("l2", "cd"), ("l2", "mm"),
                                                ("kl", "mm")])
    def test_screening_does_not_change_objective(self, penalty, solver):
        rng = np.random.default_rng(10)
        tol = 1e-7 if solver != "mm" else 1e-6
        for _ in range(2):
            spec = random_spec(rng, int(rng.integers(3, 7)), int(rng.integers(3, 7)),
                               float(rng.choice([1.0, 0.1])), penalty)
            base = _run(spec, solver, max_iters=200_000, gap_tol=tol)
            for method in sorted(SUPPORTED[spec.penalty] - {"none"}):
                res = _run(spec, solver, method, max_iters=200_000, gap_tol=tol)
                assert res.converged and base.converged
                assert abs(res.trace[-1].primal - base.trace[-1].primal) <= 10 * tol

    def test_final_screened_count_matches_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(3):
            spec = random_spec(rng, 8, 8, 0.1)
            zeros = spec.n * spec.m - true_support(reference(spec).t).size
            res = _run(spec, "fista", "sa-ctp", max_iters=100_000, gap_tol=1e-10)
            assert res.converged
            assert abs(res.state.screened_count - zeros) <= math.ceil(0.02 * spec.n * spec.m)

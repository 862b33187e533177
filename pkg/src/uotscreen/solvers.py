"""First-order solvers and the screening outer loop.

All solvers operate on the active entries only: a screened entry is gone
from ``t``, ``c`` and the index structure, so the per-iteration cost shrinks
with the active set.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .core import (DegenerateError, IterateTrace, Penalty, ProblemSpec, ScreeningState,
                   UnsupportedError, primal_objective)
from .penalties import dual_from_primal, dual_value
from .projection import project
from .screening import ScreenReport, check_supported, screen_all

log = logging.getLogger(__name__)

SOLVERS = ("fista", "mm", "cd")
SOLVER_PENALTIES = {"fista": {Penalty.L2}, "cd": {Penalty.L2}, "mm": {Penalty.L2, Penalty.KL}}
# Exponent of the KL multiplicative update (each marginal ratio enters with 1/2).
MM_EXPONENT = 0.5


@dataclass
class SolverConfig:
    kind: str = "fista"
    max_iters: int = 100_000
    gap_tol: float = 1e-7
    screen_period: int = 10
    screen_method: str = "none"
    stepsize: float | None = None
    projection: str = "shift+"
    seed: int = 0
    restart_on_compaction: bool = False

    def __post_init__(self):
        if self.kind not in SOLVERS:
            raise ValueError(f"unknown solver {self.kind!r}")
        if not self.gap_tol > 0:
            raise ValueError("gap_tol must be positive")
        if self.screen_period < 1:
            raise ValueError("screen_period must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")


@dataclass
class Iterate:
    t: np.ndarray
    z: np.ndarray | None = None  # FISTA extrapolation point
    tau: float = 1.0


class _Active:
    """Active-set view of the problem used inside the iteration loop."""

    def __init__(self, spec: ProblemSpec, state: ScreeningState):
        self.n, self.m = spec.n, spec.m
        self.rows, self.cols = state.rows, state.cols
        self.cols_off = state.cols + spec.n
        self.lc = spec.lam * spec.c[state.active]
        self.y = spec.y
        self.eps = spec.epsilon

    def marginals(self, t):
        return (np.bincount(self.rows, t, minlength=self.n),
                np.bincount(self.cols, t, minlength=self.m))


def check_solver(kind: str, penalty) -> None:
    penalty = Penalty(penalty)
    if kind not in SOLVERS:
        raise ValueError(f"unknown solver {kind!r}")
    if penalty not in SOLVER_PENALTIES[kind]:
        raise UnsupportedError(f"solver {kind!r} does not handle the {penalty.value} penalty")


def default_stepsize(spec: ProblemSpec) -> float:
    """``1/(n+m)``: ``||X||^2 <= n+m`` bounds the curvature of ``0.5||Xt-y||^2``."""
    return 1.0 / (spec.n + spec.m)


def initial_plan(spec: ProblemSpec) -> np.ndarray:
    """Strictly positive product plan ``a b' / sqrt(|a| |b|)`` (row-major)."""
    sa, sb = spec.a.sum(), spec.b.sum()
    scale = math.sqrt(sa * sb) if sa > 0 and sb > 0 else 1.0
    return np.outer(spec.a, spec.b).ravel() / scale


def fista_step(it: Iterate, spec: ProblemSpec, state: ScreeningState, stepsize=None,
               work: _Active | None = None) -> Iterate:
    """Accelerated projected-gradient step on ``lam c.t + 0.5||Xt - y||^2``."""
    if spec.penalty is not Penalty.L2:
        raise UnsupportedError("FISTA is only used for the l2 penalty")
    w = work or _Active(spec, state)
    s = default_stepsize(spec) if stepsize is None else stepsize
    z = it.t if it.z is None else it.z
    R, C = w.marginals(z)
    res = np.concatenate([R, C]) - w.y
    grad = w.lc + res[w.rows] + res[w.cols_off]
    t_new = np.maximum(z - s * grad, 0.0)
    tau_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * it.tau * it.tau))
    z_new = t_new + ((it.tau - 1.0) / tau_new) * (t_new - it.t)
    return Iterate(t_new, z_new, tau_new)


def mm_step(it: Iterate, spec: ProblemSpec, state: ScreeningState, work: _Active | None = None) -> Iterate:
    """Multiplicative majorization-minimization update (monotone in the objective).

    Jensen's inequality on each marginal term gives a separable majorizer
    whose minimizer is, per entry ``(i, j)``:

    * l2: ``t * max(0, a_i + b_j - lam c) / (R_i + C_j)``
    * KL: ``t * ((a_i/(R_i+e)) (b_j/(C_j+e)))^(1/2) * exp(-lam c / 2)``
    """
    w = work or _Active(spec, state)
    t = it.t
    R, C = w.marginals(t)
    n = w.n
    if spec.penalty is Penalty.L2:
        num = np.maximum(w.y[w.rows] + w.y[w.cols_off] - w.lc, 0.0)
        den = R[w.rows] + C[w.cols]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_new = np.where(den > 0, t * num / den, 0.0)
    elif spec.penalty is Penalty.KL:
        if np.any(w.y <= 0):
            raise DegenerateError("KL multiplicative updates need positive marginals")
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = (w.y[:n] / (R + w.eps))[w.rows] * (w.y[n:] / (C + w.eps))[w.cols]
            t_new = np.where(t > 0, t * ratio ** MM_EXPONENT * np.exp(-MM_EXPONENT * w.lc), 0.0)
    else:
        raise UnsupportedError("MM is implemented for the l2 and KL penalties")
    return Iterate(t_new)


@numba.njit(cache=True)
def _cd_pass(t, rows, cols, lc, y, R, C, n):
    for k in range(t.size):
        i = rows[k]
        j = cols[k]
        g = lc[k] + (R[i] - y[i]) + (C[j] - y[n + j])
        new = t[k] - 0.5 * g
        if new < 0.0:
            new = 0.0
        d = new - t[k]
        if d != 0.0:
            t[k] = new
            R[i] += d
            C[j] += d


def cd_step(it: Iterate, spec: ProblemSpec, state: ScreeningState, work: _Active | None = None) -> Iterate:
    """One cyclic pass of exact coordinate minimization (l2 penalty).

    The objective restricted to ``t_p`` is a parabola with curvature
    ``|x_p|^2 = 2``, so the clipped minimizer is
    ``max(0, t_p - (lam c_p + x_p.(Xt - y)) / 2)``.
    """
    if spec.penalty is not Penalty.L2:
        raise UnsupportedError("coordinate descent is only used for the l2 penalty")
    w = work or _Active(spec, state)
    t = np.array(it.t, dtype=float, copy=True)
    R, C = w.marginals(t)
    _cd_pass(t, w.rows, w.cols, w.lc, w.y, R, C, w.n)
    return Iterate(t)


def step(kind: str, it: Iterate, spec, state, stepsize=None, work=None) -> Iterate:
    if kind == "fista":
        return fista_step(it, spec, state, stepsize, work)
    if kind == "mm":
        return mm_step(it, spec, state, work)
    return cd_step(it, spec, state, work)


@dataclass
class DualCertificate:
    theta: np.ndarray
    primal: float
    dual: float

    @property
    def gap(self) -> float:
        return self.primal - self.dual


def certificate(t, spec: ProblemSpec, state: ScreeningState, projection: str = "shift") -> DualCertificate:
    """Feasible dual point from ``t`` and the primal/dual values it certifies."""
    theta = project(dual_from_primal(t, spec, state), spec, state, projection)
    return DualCertificate(theta, primal_objective(t, spec, state), dual_value(theta, spec))


@dataclass
class ScreenEvent:
    """Snapshot handed to callbacks at each screening event (before deletion)."""
    iteration: int
    t: np.ndarray
    state: ScreeningState
    theta_tilde: np.ndarray
    primal: float
    dual: float
    report: ScreenReport

    @property
    def gap(self) -> float:
        return self.primal - self.dual


@dataclass
class SolveResult:
    t: np.ndarray
    trace: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    state: ScreeningState | None = None
    theta: np.ndarray | None = None
    gap: float = math.inf


def run_with_screening(spec: ProblemSpec, config: SolverConfig, t0=None,
                       callback: Callable[[ScreenEvent], None] | None = None) -> SolveResult:
    """Solve the instance, deleting certified zeros every ``screen_period`` iterations.

    The duality gap is evaluated at the same period (so the unscreened
    baseline pays the same certification cost) and the run stops once it
    falls below ``gap_tol``.  Returns the plan inflated to length ``n*m``.
    """
    check_solver(config.kind, spec.penalty)
    check_supported(config.screen_method, spec.penalty)
    rng = np.random.default_rng(config.seed)
    state = ScreeningState(spec.n, spec.m)
    t = initial_plan(spec) if t0 is None else np.array(t0, dtype=float).ravel()
    if t.size != spec.n * spec.m or np.any(t < 0):
        raise ValueError("t0 must be a nonnegative vector of length n*m")
    it = Iterate(t)
    work = _Active(spec, state)
    trace = []
    result = SolveResult(t=None)
    start = time.perf_counter_ns()
    k = 0
    while True:
        if k % config.screen_period == 0 or k == config.max_iters:
            cert = certificate(it.t, spec, state, config.projection)
            gap = cert.gap
            result.theta, result.gap = cert.theta, gap
            done = gap <= config.gap_tol
            if not done and config.screen_method != "none" and k < config.max_iters:
                report, new_state, t_new = screen_all(cert.theta, it.t, gap, spec, state,
                                                      config.screen_method, rng,
                                                      cert.primal, cert.dual)
                if callback is not None:
                    callback(ScreenEvent(k, it.t, state, cert.theta, cert.primal, cert.dual, report))
                if report.screened:
                    # Deleted entries are zero at the optimum; keep momentum on the rest.
                    if config.restart_on_compaction or it.z is None:
                        it = Iterate(t_new)
                    else:
                        it = Iterate(t_new, new_state.restrict(state.inflate(it.z)), it.tau)
                    state, work = new_state, _Active(spec, new_state)
            trace.append(IterateTrace(k, cert.primal, cert.dual, gap, state.screened_count,
                                      time.perf_counter_ns() - start))
            if done:
                result.converged = True
                break
            if k >= config.max_iters:
                break
        it = step(config.kind, it, spec, state, config.stepsize, work)
        k += 1
    result.t = state.inflate(it.t)
    result.trace, result.n_iter, result.state = trace, k, state
    log.debug("%s/%s stopped at iter %d, gap %.3e, screened %d/%d", config.kind,
              config.screen_method, k, result.gap, state.screened_count, spec.n * spec.m)
    return result

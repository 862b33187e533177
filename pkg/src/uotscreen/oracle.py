"""Independent ground truth for small instances.

Nothing here is used by the solvers.  Objectives are recomputed with a
dense index matrix, optima are polished by an active-set Newton method and
region maxima are found by a conic solver, so the closed forms of the
screening module are checked against unrelated code.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import Penalty, ProblemSpec, UOTError
from .solvers import SolverConfig, run_with_screening

MAX_SIZE = 2000
CERT_TOL = 1e-12


class OracleUnavailable(UOTError):
    """The reference optimum could not be certified."""


def dense_X(n: int, m: int) -> np.ndarray:
    """``(n+m) x nm`` 0/1 matrix mapping a row-major plan to its row and column sums."""
    X = np.zeros((n + m, n * m))
    p = np.arange(n * m)
    X[p // m, p] = 1.0
    X[n + p % m, p] = 1.0
    return X


def _h(z, spec):
    y, e = spec.y, spec.epsilon
    if spec.penalty is Penalty.L2:
        return 0.5 * float(np.sum((z - y) ** 2))
    s = z + e
    return float(np.sum(np.where(s > 0, s * np.log(np.where(s > 0, s, 1.0) / y), 0.0) - s + y))


def _h_grad_curv(z, spec):
    y, e = spec.y, spec.epsilon
    if spec.penalty is Penalty.L2:
        return z - y, np.ones_like(z)
    s = np.maximum(z + e, 1e-300)
    return np.log(s / y), 1.0 / s


def dense_primal(t, spec: ProblemSpec, X=None) -> float:
    X = dense_X(spec.n, spec.m) if X is None else X
    t = np.asarray(t, dtype=float)
    return spec.lam * float(np.dot(spec.c, t)) + _h(X @ t, spec)


def dense_dual(theta, spec: ProblemSpec) -> float:
    y, e = spec.y, spec.epsilon
    theta = np.asarray(theta, dtype=float)
    if spec.penalty is Penalty.L2:
        return float(np.dot(y, theta) - 0.5 * np.dot(theta, theta))
    return float(np.sum(y) - np.dot(y, np.exp(-theta)) - e * np.sum(theta))


def dense_feasible_dual(t, spec: ProblemSpec, X=None) -> np.ndarray:
    """Gradient-link dual point pushed into the polytope by violation-only shifts."""
    X = dense_X(spec.n, spec.m) if X is None else X
    z = X @ np.asarray(t, dtype=float)
    g, _ = _h_grad_curv(z, spec)
    theta = -g
    n, m = spec.n, spec.m
    V = theta[:n, None] + theta[None, n:] - spec.lam * spec.c.reshape(n, m)
    shift = 0.5 * np.maximum(np.concatenate([V.max(axis=1), V.max(axis=0)]), 0.0)
    return theta - shift


@dataclass
class ReferenceSolution:
    t: np.ndarray
    theta: np.ndarray
    primal: float
    dual: float

    @property
    def gap(self) -> float:
        return self.primal - self.dual


def _objective(x, spec, X):
    return spec.lam * float(spec.c @ x) + _h(X @ x, spec)


def _polish(t, spec: ProblemSpec, X, rounds: int = 200, inner: int = 100) -> np.ndarray:
    """Active-set Newton refinement of a nonnegative approximate minimizer.

    The smooth objective is minimized over the current support (Newton steps,
    clipped at the nonnegativity boundary, Lawson-Hanson style); entries
    whose gradient is negative are then added back until the KKT conditions
    hold.
    """
    lc = spec.lam * spec.c
    x = np.maximum(np.asarray(t, dtype=float), 0.0)
    x[x < 1e-9 * max(x.max(), 1e-300)] = 0.0
    S = x > 0
    for _ in range(rounds):
        settled = False
        for _ in range(inner):
            idx = np.flatnonzero(S)
            if idx.size == 0:
                settled = True
                break
            z = X @ x
            g_h, w = _h_grad_curv(z, spec)
            XS = X[:, idx]
            g = lc[idx] + XS.T @ g_h
            if np.max(np.abs(g)) <= 1e-15:
                settled = True
                break
            H = (XS.T * w) @ XS
            d = -np.linalg.lstsq(H, g, rcond=None)[0]
            res = g + H @ d
            unbounded = np.linalg.norm(res) > 1e-10 * max(np.linalg.norm(g), 1e-300)
            if unbounded:
                d = -res  # linear decrease along the null space of H
            neg = d < 0
            amax = float(np.min(x[idx][neg] / -d[neg])) if np.any(neg) else math.inf
            alpha = amax if unbounded else min(1.0, amax)
            slope = float(g @ d)
            # Inside the quadratic-convergence zone objective differences are
            # below rounding, so the full step is taken without a line search.
            if spec.penalty is Penalty.KL and not unbounded and -slope > 1e-12:
                f0 = _objective(x, spec, X)
                while alpha > 1e-12:
                    trial = x.copy()
                    trial[idx] = np.maximum(x[idx] + alpha * d, 0.0)
                    if _objective(trial, spec, X) <= f0 + 1e-4 * alpha * slope:
                        break
                    alpha *= 0.5
            if not math.isfinite(alpha):
                raise OracleUnavailable("objective unbounded below on the support")
            blocking = idx[neg][np.argmin(x[idx][neg] / -d[neg])] if np.any(neg) else None
            x[idx] = x[idx] + alpha * d
            if alpha == amax:
                x[blocking] = 0.0  # exact zero despite rounding
            x = np.maximum(x, 0.0)
            S = x > 0
            if alpha < amax and np.linalg.norm(alpha * d) <= 1e-16 * max(np.linalg.norm(x), 1.0):
                settled = True
                break
        if not settled:
            continue  # support problem unfinished; KKT check would be premature
        g_h, _ = _h_grad_curv(X @ x, spec)
        g = lc + X.T @ g_h
        out = np.where(~S, g, np.inf)
        q = int(np.argmin(out))
        if not out[q] < -1e-13:
            break
        S[q] = True  # enters at zero; the next Newton step moves it
    return x


def reference_solve(spec: ProblemSpec, max_iters: int = 100_000) -> ReferenceSolution:
    """Certified optimum (gap <= 1e-12) of a small instance.

    Runs the plain solver without screening, refines the result with an
    active-set Newton method and certifies it with dense objective code.

    Raises
    ------
    OracleUnavailable
        If the instance is too large, the penalty has no smooth solver, or
        the certified gap stays above 1e-12.
    """
    if spec.n * spec.m > MAX_SIZE:
        raise OracleUnavailable("reference solutions are limited to n*m <= 2000")
    if spec.penalty is Penalty.TV:
        raise OracleUnavailable("no reference solver for the TV penalty")
    kind = "fista" if spec.penalty is Penalty.L2 else "mm"
    iters = max_iters if kind == "fista" else min(max_iters, 20_000)
    run = run_with_screening(spec, SolverConfig(kind, max_iters=iters, gap_tol=CERT_TOL,
                                                screen_period=100))
    X = dense_X(spec.n, spec.m)
    candidates = [run.t]
    try:
        candidates.append(_polish(run.t, spec, X))
    except (np.linalg.LinAlgError, FloatingPointError):
        pass
    best = None
    for t in candidates:
        theta = dense_feasible_dual(t, spec, X)
        sol = ReferenceSolution(t, theta, dense_primal(t, spec, X), dense_dual(theta, spec))
        if best is None or sol.gap < best.gap:
            best = sol
    if not best.gap <= CERT_TOL:
        raise OracleUnavailable(f"certified gap {best.gap:.3e} above {CERT_TOL:g}")
    return best


def true_support(t_hat, tol: float = 1e-9) -> np.ndarray:
    """Indices of entries strictly above ``tol``."""
    return np.flatnonzero(np.asarray(t_hat) > tol)


def brute_region_max(p, region, n: int, m: int, halfspaces=()) -> float:
    """Maximum of ``theta_i + theta_{n+j}`` over a ball/ellipse cut by half-spaces.

    Solved as a second-order cone program (Clarabel through cvxpy).
    """
    import cvxpy as cp

    from .regions import BallRegion, EllipseRegion

    if n + m > 40:
        raise ValueError("brute-force maximization is limited to n+m <= 40")
    i, j = divmod(int(p), m)
    if isinstance(region, BallRegion):
        center, metric, r2 = region.center, np.ones(n + m), region.radius ** 2
    elif isinstance(region, EllipseRegion):
        center, metric, r2 = region.center, np.asarray(region.metric), region.radius_sq
    else:
        raise TypeError(f"unsupported region {type(region).__name__}")
    if r2 == 0:
        theta0 = np.asarray(center)
        if all(float(h.normal @ theta0) <= h.offset + 1e-12 for h in halfspaces):
            return float(theta0[i] + theta0[n + j])
        return -math.inf
    u = cp.Variable(n + m)  # theta = center + u
    cons = [cp.norm(cp.multiply(np.sqrt(metric), u)) <= math.sqrt(r2)]
    cons += [h.normal @ u <= h.offset - float(h.normal @ center) for h in halfspaces]
    prob = cp.Problem(cp.Maximize(u[i] + u[n + j]), cons)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11)
    if prob.status in ("infeasible", "infeasible_inaccurate"):
        return -math.inf
    if prob.status in ("unbounded", "unbounded_inaccurate"):
        return math.inf
    if prob.value is None:
        raise OracleUnavailable(f"conic solver returned status {prob.status}")
    return float(center[i] + center[n + j] + prob.value)


def balanced_lp_vertices(a, b, cost):
    """Optimal vertex of the balanced transport polytope by exhaustive basis enumeration.

    Only meant for ``n, m <= 4``; ``a`` and ``b`` must have equal mass.
    Returns ``(t, value)`` with ``t`` row-major.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n, m = a.size, b.size
    if n > 4 or m > 4:
        raise ValueError("vertex enumeration is limited to n, m <= 4")
    if not math.isclose(a.sum(), b.sum(), rel_tol=1e-12):
        raise ValueError("balanced marginals required")
    A = dense_X(n, m)[:-1]  # one marginal equation is redundant
    rhs = np.concatenate([a, b])[:-1]
    c = np.asarray(cost, dtype=float).ravel()
    best_t, best_v = None, math.inf
    for basis in itertools.combinations(range(n * m), n + m - 1):
        B = A[:, basis]
        if abs(np.linalg.det(B)) < 1e-12:
            continue
        xb = np.linalg.solve(B, rhs)
        if np.any(xb < -1e-12):
            continue
        t = np.zeros(n * m)
        t[list(basis)] = np.maximum(xb, 0.0)
        v = float(c @ t)
        if v < best_v - 1e-15:
            best_t, best_v = t, v
    return best_t, best_v

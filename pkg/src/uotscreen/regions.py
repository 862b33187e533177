"""Safe regions: sets certified to contain the dual optimum.

All constructions start from a dual feasible point ``theta_t`` and the
duality gap ``P(t) - D(theta_t)`` it certifies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Penalty, ProblemSpec, ScreeningState, UnsupportedError, apply_X
from .penalties import dual_value


@dataclass(frozen=True)
class BallRegion:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius >= 0:
            raise ValueError("radius must be nonnegative")

    def slack(self, theta) -> float:
        return self.radius - float(np.linalg.norm(np.asarray(theta) - self.center))

    def contains(self, theta, tol: float = 1e-8) -> bool:
        return self.slack(theta) >= -tol


@dataclass(frozen=True)
class EllipseRegion:
    """``{theta : (theta - center)' diag(metric) (theta - center) <= radius_sq}``.

    A zero metric entry marks a coordinate left unconstrained; it is only
    allowed on coordinates no active entry touches.
    """

    center: np.ndarray
    metric: np.ndarray
    radius_sq: float

    def __post_init__(self):
        if np.any(~(np.asarray(self.metric) >= 0)):
            raise ValueError("metric entries must be nonnegative")
        if not self.radius_sq >= 0:
            raise ValueError("radius_sq must be nonnegative")

    def slack(self, theta) -> float:
        d = np.asarray(theta) - self.center
        return math.sqrt(self.radius_sq) - math.sqrt(float(self.metric @ (d * d)))

    def contains(self, theta, tol: float = 1e-8) -> bool:
        return self.slack(theta) >= -tol


@dataclass(frozen=True)
class BoxBounds:
    lower: np.ndarray
    upper: np.ndarray
    vacuous: bool = False

    def slack(self, theta) -> float:
        theta = np.asarray(theta)
        with np.errstate(invalid="ignore"):
            return float(min(np.min(theta - self.lower), np.min(self.upper - theta)))

    def contains(self, theta, tol: float = 1e-8) -> bool:
        return self.slack(theta) >= -tol


def gap_ball(theta_feasible, gap: float, L) -> BallRegion:
    """Ball of radius ``sqrt(2*gap/L)`` around a feasible dual point.

    ``L`` is a strong-concavity constant of the dual on a set containing the
    segment to the optimum; an array is reduced to its minimum.
    """
    L = float(np.min(L))
    if not L > 0:
        raise UnsupportedError("gap ball needs a positive strong concavity constant")
    gap = max(float(gap), 0.0)
    return BallRegion(np.asarray(theta_feasible, dtype=float), math.sqrt(2.0 * gap / L))


def sasvi_ball(theta_feasible, y, penalty=Penalty.L2) -> BallRegion:
    """Ball with diameter ``[theta_feasible, y]`` (l2 penalty only).

    For the l2 dual the optimum is the projection of ``y`` onto the feasible
    polytope, so ``(theta_opt - theta_feasible).(theta_opt - y) <= 0``.
    """
    if Penalty(penalty) is not Penalty.L2:
        raise UnsupportedError("the Sasvi region is only defined for the l2 penalty")
    theta = np.asarray(theta_feasible, dtype=float)
    y = np.asarray(y, dtype=float)
    return BallRegion(0.5 * (theta + y), 0.5 * float(np.linalg.norm(y - theta)))


def _kl_h(z, y, eps):
    s = np.maximum(z, 0.0) + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        xlogx = np.where(s > 0, s * np.log(np.where(s > 0, s, 1.0) / y), 0.0)
    return xlogx - s + y


def kl_reduced_primals(t, spec: ProblemSpec, state: ScreeningState) -> np.ndarray:
    """Primal value of every reduced problem obtained by deleting one marginal.

    Deleting coordinate ``q`` removes its divergence term and every transport
    entry of row (or column) ``q``; the opposite-side marginal sums lose those
    entries.  Evaluated at the restriction of ``t``; O(active) in total.
    """
    n, y, eps, lam = spec.n, spec.y, spec.epsilon, spec.lam
    t = np.asarray(t, dtype=float)
    z = apply_X(t, state)
    R, C = z[:n], z[n:]
    h = _kl_h(z, y, eps)
    P = lam * float(spec.c[state.active] @ t) + float(h.sum())
    rows, cols = state.rows, state.cols
    ct = lam * spec.c[state.active] * t
    # Loss on the opposite marginal when an entry disappears.
    d_col = h[n + cols] - _kl_h(C[cols] - t, y[n + cols], eps)
    d_row = h[rows] - _kl_h(R[rows] - t, y[rows], eps)
    Pq = np.empty(n + spec.m)
    Pq[:n] = P - h[:n] - np.bincount(rows, ct + d_col, minlength=n)
    Pq[n:] = P - h[n:] - np.bincount(cols, ct + d_row, minlength=spec.m)
    return Pq


def kl_low_bounds(theta_feasible, t, spec: ProblemSpec, state: ScreeningState) -> np.ndarray:
    """Lower bounds on every coordinate of the KL dual optimum (``-inf`` if unavailable)."""
    if spec.penalty is not Penalty.KL:
        raise UnsupportedError("coordinate lower bounds are derived for the KL penalty")
    K = dual_value(theta_feasible, spec) - kl_reduced_primals(t, spec, state)
    num = spec.epsilon - spec.y
    den = K - spec.y + spec.epsilon
    ok = (num < 0) & (den < 0) & np.isfinite(den)
    low = np.full(spec.y.size, -np.inf)
    low[ok] = np.log(num[ok] / den[ok])
    return low


def kl_low_bound(theta_feasible, t, j: int, spec, state) -> float:
    return float(kl_low_bounds(theta_feasible, t, spec, state)[j])


def low_from_K(K: float, y_j: float, epsilon: float) -> float:
    """``log((eps - y_j) / (K - y_j + eps))`` or ``-inf`` when the sign check fails."""
    num, den = epsilon - y_j, K - y_j + epsilon
    if num < 0 and den < 0:
        return math.log(num / den)
    return -math.inf


def box_upper(low, spec: ProblemSpec, state: ScreeningState) -> np.ndarray:
    """Upper bounds implied by the active constraints and the lower bounds.

    A row coordinate ``u`` gets ``min_v lam*c_uv - low_{n+v}`` over active
    entries of row ``u`` (symmetric for columns); ``+inf`` when unconstrained.
    """
    from .projection import _segment_max

    n = spec.n
    low = np.asarray(low, dtype=float)
    cap = spec.lam * spec.c[state.active]
    # min_v (cap - low_{n+v}) == -max_v (low_{n+v} - cap)
    row_up = -_segment_max(low[n + state.cols] - cap, state.row_counts)
    col_up = -_segment_max(low[state.rows] - cap, state.col_counts, state.col_order)
    return np.concatenate([row_up, col_up])


def kl_box(theta_feasible, t, spec: ProblemSpec, state: ScreeningState) -> BoxBounds:
    """Coordinate box around the KL dual optimum.

    Lower bounds come from :func:`kl_low_bounds` and upper bounds from
    :func:`box_upper`.  The box is then widened to contain
    ``theta_feasible`` so the whole segment to the optimum lies inside.
    ``vacuous`` is set when no lower bound is available.
    """
    theta = np.asarray(theta_feasible, dtype=float)
    low = kl_low_bounds(theta, t, spec, state)
    upper = box_upper(low, spec, state)
    vacuous = bool(np.all(np.isneginf(low)))
    return BoxBounds(np.minimum(low, theta), np.maximum(upper, theta), vacuous)


def blockwise_metric(box: BoxBounds, y) -> np.ndarray:
    """Curvature lower bounds ``y * exp(-upper)`` of the KL dual on the box."""
    with np.errstate(over="ignore"):
        return np.asarray(y, dtype=float) * np.exp(-np.asarray(box.upper, dtype=float))


def gap_ellipse(theta_feasible, gap: float, metric) -> EllipseRegion:
    return EllipseRegion(np.asarray(theta_feasible, dtype=float),
                         np.asarray(metric, dtype=float), 2.0 * max(float(gap), 0.0))


def touched_coordinates(state: ScreeningState) -> np.ndarray:
    """Dual coordinates that appear in at least one active constraint."""
    return np.concatenate([state.row_counts > 0, state.col_counts > 0])

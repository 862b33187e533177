"""Cheap maps from an arbitrary dual point into the dual feasible polytope.

Both maps only look at the constraints of entries that are still active;
screened entries are fixed to zero so their constraints no longer bind the
reduced dual problem (whose optimum coincides with the full one).
"""
from __future__ import annotations

import numpy as np

from .core import DegenerateError, ProblemSpec, ScreeningState, apply_X_transpose


def _segment_max(vals, counts, order=None):
    """Max of ``vals`` over consecutive segments of the given sizes (-inf if empty)."""
    if order is not None:
        vals = vals[order]
    out = np.full(counts.size, -np.inf)
    nonempty = counts > 0
    if vals.size:
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        out[nonempty] = np.maximum.reduceat(vals, starts[nonempty])
    return out


def constraint_slacks(theta, spec: ProblemSpec, state: ScreeningState):
    """``x_p.theta - lam*c_p`` for active ``p`` (<= 0 means satisfied)."""
    return apply_X_transpose(theta, state) - spec.lam * spec.c[state.active]


def row_col_max_violation(theta, spec, state):
    s = constraint_slacks(theta, spec, state)
    return (_segment_max(s, state.row_counts),
            _segment_max(s, state.col_counts, state.col_order))


def shifting_projection(theta, spec: ProblemSpec, state: ScreeningState | None = None,
                        only_violations: bool = False) -> np.ndarray:
    """Shift every dual coordinate by half of its worst constraint value.

    ``alpha_u -= max_j (alpha_u + beta_j - lam*c_uj) / 2`` and symmetrically
    for ``beta``.  Any pair then satisfies ``alpha_u + beta_j <= lam*c_uj``
    because each coordinate absorbed at least half of that pair's violation.
    The shift is applied as is, so feasible inputs move too, unless
    ``only_violations`` is set, in which case negative shifts are dropped
    (the output stays feasible and feasible inputs become fixed points).
    Coordinates with no active constraint are left unchanged.  Cost O(nm).
    """
    if state is None:
        state = ScreeningState(spec.n, spec.m)
    theta = np.asarray(theta, dtype=float)
    rmax, cmax = row_col_max_violation(theta, spec, state)
    shift = 0.5 * np.concatenate([rmax, cmax])
    shift[~np.isfinite(shift)] = 0.0
    if only_violations:
        np.maximum(shift, 0.0, out=shift)
    return theta - shift


def residuals_rescale(theta, spec: ProblemSpec, state: ScreeningState | None = None) -> np.ndarray:
    """``theta / max(1, max_p x_p.theta / (lam*c_p))`` over active entries.

    Raises
    ------
    DegenerateError
        If some active entry has ``c_p = 0`` while ``x_p.theta > 0``: no
        positive scaling can satisfy that constraint.
    """
    if state is None:
        state = ScreeningState(spec.n, spec.m)
    theta = np.asarray(theta, dtype=float)
    xt = apply_X_transpose(theta, state)
    lc = spec.lam * spec.c[state.active]
    zero = lc <= 0
    if np.any(zero & (xt > 0)):
        raise DegenerateError("residuals rescaling: zero cost entry with positive x_p.theta")
    ratios = xt[~zero] / lc[~zero]
    scale = max(1.0, float(ratios.max())) if ratios.size else 1.0
    return theta / scale


def is_feasible(theta, spec, state=None, tol: float = 1e-12) -> bool:
    if state is None:
        state = ScreeningState(spec.n, spec.m)
    if state.n_active == 0:
        return True
    return bool(constraint_slacks(theta, spec, state).max() <= tol)


def project(theta, spec, state, method: str = "shift") -> np.ndarray:
    if method == "shift":
        return shifting_projection(theta, spec, state)
    if method == "shift+":
        return shifting_projection(theta, spec, state, only_violations=True)
    if method == "rescale":
        return residuals_rescale(theta, spec, state)
    raise ValueError(f"unknown projection {method!r}")

"""Problem representation and the implicit index-matrix algebra.

A transport plan ``T`` of shape ``(n, m)`` is flattened row-major into ``t``.
The index matrix ``X`` stacks the row-sum operator (``n`` rows) on top of the
column-sum operator (``m`` rows), so ``X @ t == concat(T.sum(1), T.sum(0))``
and each column ``x_p`` of ``X`` holds exactly two ones, at ``i`` and
``n + j`` for ``(i, j) = pair_index(p)``.  ``X`` is never materialized.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class UOTError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(UOTError, ValueError):
    pass


class ContractViolation(UOTError):
    """A caller broke a documented precondition (e.g. infeasible dual point)."""


class DegenerateError(UOTError):
    """The computation is undefined for this input (zero cost, zero marginal)."""


class UnsupportedError(UOTError):
    """Method/penalty/solver combination that has no safe construction."""


class Penalty(str, enum.Enum):
    L2 = "l2"
    KL = "kl"
    TV = "tv"


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """One unbalanced OT instance: ``min_{t>=0} lam * c.t + D(X t, y)``.

    Parameters
    ----------
    a, b : array_like
        Row and column marginals (nonnegative).
    c : array_like
        Cost, either the ``(n, m)`` matrix or its row-major flattening.
    lam : float
        Weight of the transport cost.
    penalty : Penalty or str
        Marginal divergence: ``"l2"`` (``0.5 * ||Xt - y||^2``), ``"kl"`` or
        ``"tv"``.
    epsilon : float
        Shift used by the KL divergence; must satisfy ``0 <= epsilon < min(y)``.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    lam: float
    penalty: Penalty = Penalty.L2
    epsilon: float = 0.0
    y: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        a = np.ascontiguousarray(self.a, dtype=float).ravel()
        b = np.ascontiguousarray(self.b, dtype=float).ravel()
        c = np.ascontiguousarray(self.c, dtype=float).ravel()
        n, m = a.size, b.size
        if n == 0 or m == 0:
            raise DimensionError("marginals must be nonempty")
        if c.size != n * m:
            raise DimensionError(f"cost has {c.size} entries, expected n*m = {n * m}")
        for name, v in (("a", a), ("b", b), ("c", c)):
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} has non-finite entries")
            if np.any(v < 0):
                raise ValueError(f"{name} has negative entries")
        lam = float(self.lam)
        if not (lam > 0 and math.isfinite(lam)):
            raise ValueError("lam must be a positive finite number")
        penalty = Penalty(self.penalty)
        eps = float(self.epsilon)
        y = np.concatenate([a, b])
        if penalty is Penalty.KL and not (0.0 <= eps < y.min()):
            raise ValueError("KL penalty requires 0 <= epsilon < min(y)")
        for k, v in (("a", a), ("b", b), ("c", c), ("lam", lam),
                     ("penalty", penalty), ("epsilon", eps), ("y", y)):
            object.__setattr__(self, k, v)
        for v in (a, b, c, y):
            v.setflags(write=False)

    @property
    def n(self) -> int:
        return self.a.size

    @property
    def m(self) -> int:
        return self.b.size

    @property
    def cost_matrix(self) -> np.ndarray:
        return self.c.reshape(self.n, self.m)

    def replace(self, **changes) -> "ProblemSpec":
        kw = dict(a=self.a, b=self.b, c=self.c, lam=self.lam,
                  penalty=self.penalty, epsilon=self.epsilon)
        kw.update(changes)
        return ProblemSpec(**kw)

    def to_dict(self) -> dict:
        return {"n": self.n, "m": self.m, "a": self.a.tolist(), "b": self.b.tolist(),
                "cost": self.c.tolist(), "lambda": self.lam,
                "penalty": self.penalty.value, "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemSpec":
        n, m = int(d["n"]), int(d["m"])
        spec = cls(a=d["a"], b=d["b"], c=d["cost"], lam=d.get("lambda", 1.0),
                   penalty=d.get("penalty", "l2"), epsilon=d.get("epsilon", 0.0))
        if (spec.n, spec.m) != (n, m):
            raise DimensionError(f"declared shape {(n, m)} does not match marginals")
        return spec


@dataclass(frozen=True)
class IterateTrace:
    iter: int
    primal: float
    dual: float
    gap: float
    screened: int
    elapsed_ns: int

    FIELDS = ("iter", "primal", "dual", "gap", "screened", "elapsed_ns")


def pair_index(p, n, m):
    """Map flat index ``p`` to ``(row, column)`` (row-major)."""
    p = np.asarray(p)
    if np.any(p < 0) or np.any(p >= n * m):
        raise IndexError(f"flat index out of range [0, {n * m})")
    i, j = np.divmod(p, m)
    if i.ndim == 0:
        return int(i), int(j)
    return i, j


def flat_index(i, j, n, m):
    i, j = np.asarray(i), np.asarray(j)
    if np.any((i < 0) | (i >= n) | (j < 0) | (j >= m)):
        raise IndexError("pair index out of range")
    p = i * m + j
    return int(p) if p.ndim == 0 else p


class ScreeningState:
    """Active set bookkeeping for permanently screened transport entries.

    ``active`` lists the original flat indices still in the problem, in
    increasing (row-major) order; ``rows``/``cols`` are their coordinates.
    ``col_order`` sorts the active entries by column so that column-wise
    reductions can use contiguous segments.
    """

    def __init__(self, n: int, m: int, mask: np.ndarray | None = None):
        self.n, self.m = n, m
        if mask is None:
            mask = np.ones(n * m, dtype=bool)
        self.mask = np.array(mask, dtype=bool)
        if self.mask.size != n * m:
            raise DimensionError("mask length must be n*m")
        self._index()

    def _index(self):
        self.active = np.flatnonzero(self.mask)
        self.rows, self.cols = np.divmod(self.active, self.m)
        self.row_counts = np.bincount(self.rows, minlength=self.n)
        self.col_counts = np.bincount(self.cols, minlength=self.m)
        self.col_order = np.argsort(self.cols, kind="stable")

    @property
    def n_active(self) -> int:
        return self.active.size

    @property
    def screened_count(self) -> int:
        return self.mask.size - self.active.size

    @property
    def active_to_original(self) -> np.ndarray:
        return self.active

    def copy(self) -> "ScreeningState":
        return ScreeningState(self.n, self.m, self.mask)

    def inflate(self, t: np.ndarray) -> np.ndarray:
        """Scatter an active-length vector back to length ``n*m`` (zeros elsewhere)."""
        _check_len(t, self.n_active, "t")
        out = np.zeros(self.n * self.m)
        out[self.active] = t
        return out

    def restrict(self, v: np.ndarray) -> np.ndarray:
        _check_len(v, self.n * self.m, "vector")
        return np.asarray(v)[self.active]


def _check_len(v, expected, name):
    if np.shape(v) != (expected,):
        raise DimensionError(f"{name} has shape {np.shape(v)}, expected ({expected},)")


def compact(state: ScreeningState, newly_screened, t=None, c=None):
    """Permanently remove ``newly_screened`` (original flat indices).

    Returns the new state together with ``t`` and ``c`` restricted to the
    surviving entries (``None`` passes through).
    """
    newly = np.unique(np.asarray(newly_screened, dtype=np.intp))
    if t is not None:
        _check_len(t, state.n_active, "t")
    if c is not None:
        _check_len(c, state.n_active, "c")
    if newly.size == 0:
        return state, t, c
    if newly.min() < 0 or newly.max() >= state.mask.size:
        raise IndexError("screened index out of range")
    if not np.all(state.mask[newly]):
        raise ContractViolation("attempt to screen an already-screened index")
    keep = np.ones(state.n_active, dtype=bool)
    keep[np.searchsorted(state.active, newly)] = False
    mask = state.mask.copy()
    mask[newly] = False
    new_state = ScreeningState(state.n, state.m, mask)
    return (new_state,
            None if t is None else np.asarray(t)[keep],
            None if c is None else np.asarray(c)[keep])


def apply_X(t, state: ScreeningState) -> np.ndarray:
    """Row sums followed by column sums of the plan encoded by active ``t``."""
    t = np.asarray(t, dtype=float)
    _check_len(t, state.n_active, "t")
    return np.concatenate([np.bincount(state.rows, t, minlength=state.n),
                           np.bincount(state.cols, t, minlength=state.m)])


def apply_X_transpose(theta, state: ScreeningState) -> np.ndarray:
    """``x_p . theta = alpha_i + beta_j`` for every active entry ``p``."""
    theta = np.asarray(theta, dtype=float)
    _check_len(theta, state.n + state.m, "theta")
    return theta[state.rows] + theta[state.n + state.cols]


def primal_objective(t, spec: ProblemSpec, state: ScreeningState) -> float:
    """``lam * c.t + D(Xt, y)`` over the active entries (screened ones are zero)."""
    from .penalties import divergence

    t = np.asarray(t, dtype=float)
    if np.any(np.isnan(t)):
        raise FloatingPointError("NaN in transport vector")
    c = spec.c[state.active]
    return spec.lam * float(c @ t) + divergence(apply_X(t, state), spec)


def dual_violation(theta, spec: ProblemSpec, state: ScreeningState) -> float:
    """Largest ``x_p.theta - lam*c_p`` over active entries (``-inf`` if none)."""
    if state.n_active == 0:
        return -math.inf
    return float(np.max(apply_X_transpose(theta, state) - spec.lam * spec.c[state.active]))


def duality_gap(t, theta_feasible, spec: ProblemSpec, state: ScreeningState,
                feas_tol: float = 1e-9) -> float:
    """``P(t) - D(theta)``; ``theta`` must satisfy the active dual constraints."""
    from .penalties import dual_value

    viol = dual_violation(theta_feasible, spec, state)
    if viol > feas_tol:
        raise ContractViolation(f"dual point violates a constraint by {viol:.3e}")
    return primal_objective(t, spec, state) - dual_value(theta_feasible, spec)

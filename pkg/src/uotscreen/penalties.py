"""Marginal penalties: primal divergence, dual function and its derivatives.

The dual of ``min_{t>=0} lam*c.t + h(Xt)`` is ``max -h*(-theta)`` subject to
``x_p.theta <= lam*c_p``.  For the three supported penalties:

======  ==============================  ==================================
kind    h(z)                            D(theta) = -h*(-theta)
======  ==============================  ==================================
l2      0.5*||z - y||^2                 -0.5*||theta||^2 + y.theta
kl      sum (z+e)log((z+e)/y) - (z+e)+y  -y.exp(-theta) + y.1 - e*theta.1
tv      ||z - y||_1                     y.theta if ||theta||_inf < 1
======  ==============================  ==================================
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import DegenerateError, Penalty, ProblemSpec, ScreeningState, apply_X

EXP_CLAMP = 700.0


@dataclass(frozen=True)
class PenaltyModel:
    kind: Penalty
    y: np.ndarray
    epsilon: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Penalty(self.kind))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        if np.any(self.y < 0):
            raise ValueError("marginals must be nonnegative")
        # epsilon = 0 with a zero marginal is kept representable so the
        # divergence can report it as infinite; problem specs reject it.
        if self.kind is Penalty.KL and not (0 <= self.epsilon < self.y.min() or self.epsilon == 0):
            raise ValueError("KL penalty requires 0 <= epsilon < min(y)")

    @classmethod
    def from_spec(cls, spec: ProblemSpec) -> "PenaltyModel":
        return cls(spec.penalty, spec.y, spec.epsilon)


def as_model(obj) -> PenaltyModel:
    if isinstance(obj, PenaltyModel):
        return obj
    if isinstance(obj, ProblemSpec):
        return PenaltyModel.from_spec(obj)
    raise TypeError(f"expected PenaltyModel or ProblemSpec, got {type(obj).__name__}")


def exp_neg(theta):
    """``exp(-theta)`` with ``theta`` clamped to ``[-700, 700]``.

    Returns the values and whether any clamping happened.
    """
    theta = np.asarray(theta, dtype=float)
    clipped = np.clip(theta, -EXP_CLAMP, EXP_CLAMP)
    return np.exp(-clipped), bool(np.any(clipped != theta))


def divergence(z, model) -> float:
    """Primal marginal penalty ``h(z)`` with ``z = X t``."""
    mdl = as_model(model)
    z = np.asarray(z, dtype=float)
    if z.shape != mdl.y.shape:
        raise ValueError("z and y must have the same shape")
    if np.any(z < 0):
        raise ValueError("divergence is defined for nonnegative marginals only")
    y = mdl.y
    if mdl.kind is Penalty.L2:
        r = z - y
        return 0.5 * float(r @ r)
    if mdl.kind is Penalty.TV:
        return float(np.abs(z - y).sum())
    s = z + mdl.epsilon
    pos = s > 0
    if np.any(pos & (y == 0)):
        warnings.warn("KL divergence is infinite: mass on a zero marginal", RuntimeWarning)
        return math.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        xlogx = np.where(pos, s * np.log(np.where(pos, s, 1.0) / np.where(pos, y, 1.0)), 0.0)
    return float(np.sum(xlogx - s + y))


def dual_value(theta, model, return_flag: bool = False):
    """Dual objective ``D(theta)`` (constraints are not checked here).

    For KL the exponential is evaluated on clamped ``theta``; with
    ``return_flag=True`` the function returns ``(value, clamped)``.
    """
    mdl = as_model(model)
    theta = np.asarray(theta, dtype=float)
    y = mdl.y
    flag = False
    if mdl.kind is Penalty.L2:
        val = -0.5 * float(theta @ theta) + float(y @ theta)
    elif mdl.kind is Penalty.KL:
        e, flag = exp_neg(theta)
        val = -float(y @ e) + float(y.sum()) - mdl.epsilon * float(theta.sum())
    else:
        val = float(y @ theta) if np.all(np.abs(theta) < 1.0) else -math.inf
    return (val, flag) if return_flag else val


def dual_gradient(theta, model) -> np.ndarray:
    mdl = as_model(model)
    theta = np.asarray(theta, dtype=float)
    if mdl.kind is Penalty.L2:
        return mdl.y - theta
    if mdl.kind is Penalty.KL:
        return mdl.y * exp_neg(theta)[0] - mdl.epsilon
    return mdl.y.copy()


def hessian_diag(theta, model) -> np.ndarray:
    """Diagonal of the (diagonal) dual Hessian."""
    mdl = as_model(model)
    theta = np.asarray(theta, dtype=float)
    if mdl.kind is Penalty.L2:
        return -np.ones_like(theta)
    if mdl.kind is Penalty.KL:
        return -mdl.y * exp_neg(theta)[0]
    return np.zeros_like(theta)


def link(z, model) -> np.ndarray:
    """Dual point ``-grad h(z)`` associated with marginals ``z``."""
    mdl = as_model(model)
    z = np.asarray(z, dtype=float)
    if mdl.kind is Penalty.L2:
        return mdl.y - z
    if mdl.kind is Penalty.KL:
        if np.any(mdl.y == 0):
            raise DegenerateError("KL link needs strictly positive marginals")
        s = z + mdl.epsilon
        with np.errstate(divide="ignore"):
            theta = np.log(mdl.y) - np.log(s)
        return np.clip(theta, -EXP_CLAMP, EXP_CLAMP)
    raise DegenerateError("TV penalty has no differentiable primal-dual link")


def dual_from_primal(t, spec: ProblemSpec, state: ScreeningState) -> np.ndarray:
    """Candidate dual point from the current plan; generally infeasible."""
    return link(apply_X(t, state), spec)

"""Safe screening tests for unbalanced OT.

An active entry ``p = (i, j)`` is screened when an upper bound of
``theta_i + theta_{n+j}`` over a safe region is strictly below ``lam*c_p``:
the dual optimum then leaves that constraint slack, hence ``t_p = 0`` at the
primal optimum.

Every region here is an ellipsoid ``E = {(theta-o)' L (theta-o) <= r^2}``
(a ball when ``L = I``), optionally cut by half-spaces ``a_k.theta <= e_k``
obtained by summing dual constraints with weights ``t_l >= 0``.  For any
multipliers ``mu >= 0`` Lagrangian weak duality gives the bound::

    max_{E, cuts} d.theta <= d.o + sum_k mu_k (e_k - a_k.o)
                              + r * ||d - sum_k mu_k a_k||_{L^-1}

so any nonnegative multiplier vector yields a *valid* bound, and the
minimum over candidates stays valid.  The candidates are the closed-form
KKT multipliers for each active set (region only, region + one cut, region
+ both cuts); when the KKT guess is right the bound is exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .core import Penalty, ProblemSpec, ScreeningState, UnsupportedError, apply_X, compact, pair_index
from .regions import (BallRegion, EllipseRegion, blockwise_metric, gap_ball, gap_ellipse, kl_box,
                      sasvi_ball, touched_coordinates)

METHODS = ("none", "gap", "sa", "ell", "dome", "gap-ctp", "sa-ctp", "ell-ctp", "sa-ran")

SUPPORTED = {
    Penalty.L2: {"none", "gap", "sa", "dome", "gap-ctp", "sa-ctp", "sa-ran"},
    Penalty.KL: {"none", "gap", "ell", "dome", "gap-ctp", "ell-ctp"},
    Penalty.TV: {"none"},
}

SCREEN_MARGIN = 1e-12


def check_supported(method: str, penalty) -> None:
    penalty = Penalty(penalty)
    if method not in METHODS:
        raise ValueError(f"unknown screening method {method!r}")
    if method not in SUPPORTED[penalty]:
        raise UnsupportedError(f"screening method {method!r} has no safe region "
                               f"for the {penalty.value} penalty")


@dataclass(frozen=True)
class Halfspace:
    normal: np.ndarray
    offset: float


@dataclass(frozen=True)
class HalfspacePair:
    primary_normal: np.ndarray
    primary_offset: float
    secondary_normal: np.ndarray
    secondary_offset: float

    @property
    def halfspaces(self):
        return [Halfspace(self.primary_normal, self.primary_offset),
                Halfspace(self.secondary_normal, self.secondary_offset)]


@dataclass
class ScreenReport:
    tested: int
    screened: int
    newly_screened: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))
    bounds: np.ndarray | None = None
    flags: tuple = ()


# ---------------------------------------------------------------------------
# Bound evaluation from Gram data (vectorized over entries)
# ---------------------------------------------------------------------------

def _phi(base, r, dd, mu, h, ad, aa):
    """Lagrangian bound for multipliers ``mu`` (list of arrays, one per cut)."""
    val = np.array(base, dtype=float, copy=True)
    q = np.array(dd, dtype=float, copy=True)
    for k, mk in enumerate(mu):
        val = val + mk * h[k]
        q = q - 2.0 * mk * ad[k]
        for l, ml in enumerate(mu):
            q = q + mk * ml * aa[k][l]
    return val + r * np.sqrt(np.maximum(q, 0.0))


def _single_cut_mu(r, dd, h, ad, aa):
    """Optimal multiplier when only one cut and the ellipsoid boundary are active.

    Works in the coordinates where the region is the unit ball; there the
    cut reads ``g.z <= h`` with ``|g|^2 = r^2 aa`` and the objective is
    ``f.z`` with ``|f|^2 = r^2 dd``, ``f.g = r^2 ad``.
    """
    ff, fg, gg = r * r * dd, r * r * ad, r * r * aa
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.sqrt(np.maximum(gg * ff - fg * fg, 0.0) / (gg - h * h))
        mu = (fg - h * s) / gg
    ok = (gg > h * h) & np.isfinite(mu)
    return np.where(ok, np.maximum(mu, 0.0), 0.0)


def _two_cut_mu(r, dd, h1, h2, ad1, ad2, a11, a12, a22):
    """KKT multipliers with both cuts and the ellipsoid boundary active.

    With ``M`` the 2x2 Gram matrix of the cuts, ``Gf`` their inner products
    with the objective and ``rho = |f - G mu|`` (twice the ellipsoid
    multiplier), stationarity gives ``mu = M^-1 (Gf - rho h)`` and
    ``rho^2 (1 - h' M^-1 h) = |f|^2 - Gf' M^-1 Gf``.  Only the positive root
    of that quadratic is KKT-consistent.
    """
    r2 = r * r
    m11, m12, m22 = r2 * a11, r2 * a12, r2 * a22
    g1, g2, ff = r2 * ad1, r2 * ad2, r2 * dd
    det = m11 * m22 - m12 * m12
    scale = np.maximum(m11 * m22, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv11, inv12, inv22 = m22 / det, -m12 / det, m11 / det
        hMh = inv11 * h1 * h1 + 2 * inv12 * h1 * h2 + inv22 * h2 * h2
        fMf = inv11 * g1 * g1 + 2 * inv12 * g1 * g2 + inv22 * g2 * g2
        perp = np.maximum(ff - fMf, 0.0)
        rho = np.sqrt(perp / (1.0 - hMh))
        x1, x2 = g1 - rho * h1, g2 - rho * h2
        mu1 = inv11 * x1 + inv12 * x2
        mu2 = inv12 * x1 + inv22 * x2
    ok = (det > 1e-12 * scale) & (hMh < 1.0) & np.isfinite(mu1) & np.isfinite(mu2)
    return (np.where(ok, np.maximum(mu1, 0.0), 0.0), np.where(ok, np.maximum(mu2, 0.0), 0.0))


def bound_from_gram_reference(base, r, dd, h=(), ad=(), aa=()):
    """Array-at-a-time version of :func:`bound_from_gram` (kept as a cross-check)."""
    best = _phi(base, r, dd, [], h, ad, aa)
    if r == 0 or len(h) == 0:
        return best
    for k in range(len(h)):
        mu = _single_cut_mu(r, dd, h[k], ad[k], aa[k][k])
        mus = [np.zeros_like(mu)] * len(h)
        mus[k] = mu
        best = np.minimum(best, _phi(base, r, dd, mus, h, ad, aa))
    if len(h) == 2:
        mu1, mu2 = _two_cut_mu(r, dd, h[0], h[1], ad[0], ad[1], aa[0][0], aa[0][1], aa[1][1])
        best = np.minimum(best, _phi(base, r, dd, [mu1, mu2], h, ad, aa))
    return best


@numba.njit(cache=True, inline="always")
def _phi_scalar(base, r, dd, m1, m2, h1, h2, ad1, ad2, a11, a12, a22):
    q = dd - 2.0 * (m1 * ad1 + m2 * ad2) + m1 * m1 * a11 + 2.0 * m1 * m2 * a12 + m2 * m2 * a22
    return base + m1 * h1 + m2 * h2 + r * math.sqrt(max(q, 0.0))


@numba.njit(cache=True, inline="always")
def _single_mu_scalar(r2, dd, h, ad, aa):
    ff, fg, gg = r2 * dd, r2 * ad, r2 * aa
    den = gg - h * h
    if not den > 0.0:
        return 0.0
    mu = (fg - h * math.sqrt(max(gg * ff - fg * fg, 0.0) / den)) / gg
    if not math.isfinite(mu):
        return 0.0
    return max(mu, 0.0)


@numba.njit(cache=True, inline="always")
def _best_mu(base, r, dd, ncuts, h1, h2, ad1, ad2, a11, a12, a22):
    """Smallest candidate bound and its multipliers for one entry."""
    b = _phi_scalar(base, r, dd, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    w1 = 0.0
    w2 = 0.0
    if r == 0.0 or ncuts == 0:
        return b, w1, w2
    r2 = r * r
    m1 = _single_mu_scalar(r2, dd, h1, ad1, a11)
    c = _phi_scalar(base, r, dd, m1, 0.0, h1, h2, ad1, ad2, a11, a12, a22)
    if c < b:
        b, w1, w2 = c, m1, 0.0
    if ncuts == 2:
        m2 = _single_mu_scalar(r2, dd, h2, ad2, a22)
        c = _phi_scalar(base, r, dd, 0.0, m2, h1, h2, ad1, ad2, a11, a12, a22)
        if c < b:
            b, w1, w2 = c, 0.0, m2
        M11, M12, M22 = r2 * a11, r2 * a12, r2 * a22
        g1, g2, ff = r2 * ad1, r2 * ad2, r2 * dd
        det = M11 * M22 - M12 * M12
        if det > 1e-12 * max(M11 * M22, 1e-300):
            i11, i12, i22 = M22 / det, -M12 / det, M11 / det
            hMh = i11 * h1 * h1 + 2.0 * i12 * h1 * h2 + i22 * h2 * h2
            fMf = i11 * g1 * g1 + 2.0 * i12 * g1 * g2 + i22 * g2 * g2
            if hMh < 1.0:
                rho = math.sqrt(max(ff - fMf, 0.0) / (1.0 - hMh))
                x1, x2 = g1 - rho * h1, g2 - rho * h2
                u1 = i11 * x1 + i12 * x2
                u2 = i12 * x1 + i22 * x2
                if math.isfinite(u1) and math.isfinite(u2):
                    u1, u2 = max(u1, 0.0), max(u2, 0.0)
                    c = _phi_scalar(base, r, dd, u1, u2, h1, h2, ad1, ad2, a11, a12, a22)
                    if c < b:
                        b, w1, w2 = c, u1, u2
    return b, w1, w2


@numba.njit(cache=True)
def _bound_kernel(base, r, dd, ncuts, h1, h2, ad1, ad2, a11, a12, a22, out, mu1, mu2):
    for k in range(base.size):
        out[k], mu1[k], mu2[k] = _best_mu(base[k], r, dd[k], ncuts, h1[k], h2[k], ad1[k],
                                          ad2[k], a11[k], a12[k], a22[k])


@numba.njit(cache=True, inline="always")
def _at(x, k):
    return x[k] if x.size > 1 else x[0]


@numba.njit(cache=True)
def _certified_kernel(base, base_mag, dd, r, gamma, ncuts, h1, h2, ad1, ad2, a11, a12, a22,
                      h1m, h2m, ad1m, ad2m, a11m, a12m, a22m, raw, upper, mu1, mu2):
    # Length-1 arrays stand for values shared by all entries.
    for k in range(base.size):
        b, w1, w2 = _best_mu(base[k], r, dd[k], ncuts, _at(h1, k), _at(h2, k), _at(ad1, k),
                             _at(ad2, k), _at(a11, k), _at(a12, k), _at(a22, k))
        lin = base_mag[k] + w1 * _at(h1m, k) + w2 * _at(h2m, k)
        q = (dd[k] + 2.0 * (w1 * _at(ad1m, k) + w2 * _at(ad2m, k)) + w1 * w1 * _at(a11m, k)
             + 2.0 * w1 * w2 * _at(a12m, k) + w2 * w2 * _at(a22m, k))
        raw[k] = b
        upper[k] = b + gamma * lin + r * math.sqrt(gamma * q)
        mu1[k] = w1
        mu2[k] = w2


def bound_from_gram(base, r, dd, h=(), ad=(), aa=(), return_mu=False):
    """Upper bound of ``d.theta`` over a region cut by 0, 1 or 2 half-spaces.

    The bound is the minimum of the Lagrangian bound over the candidate
    multipliers (none, each cut alone, both cuts).

    Parameters
    ----------
    base : array_like
        ``d.o`` (objective at the region center).
    r : float
        Region radius (``sqrt`` of the right-hand side of the quadratic form).
    dd : array_like
        ``d' L^-1 d``.
    h : sequence
        Cut slacks at the center, ``e_k - a_k.o``.
    ad, aa : sequences
        ``a_k' L^-1 d`` and the Gram matrix ``a_k' L^-1 a_l``.
    return_mu : bool
        Also return the winning multipliers ``(mu_1, mu_2)``.
    """
    base = np.atleast_1d(np.asarray(base, dtype=float))
    shape = np.broadcast_shapes(base.shape, np.shape(dd))
    if len(h) > 2:
        raise ValueError("at most two cuts are supported")

    def arr(v):
        return np.ascontiguousarray(np.broadcast_to(np.asarray(v, dtype=float), shape))

    zero = np.zeros(shape)
    k = len(h)
    h1 = arr(h[0]) if k >= 1 else zero
    h2 = arr(h[1]) if k == 2 else zero
    ad1 = arr(ad[0]) if k >= 1 else zero
    ad2 = arr(ad[1]) if k == 2 else zero
    a11 = arr(aa[0][0]) if k >= 1 else zero
    a12 = arr(aa[0][1]) if k == 2 else zero
    a22 = arr(aa[1][1]) if k == 2 else zero
    out, mu1, mu2 = np.empty(shape), np.empty(shape), np.empty(shape)
    _bound_kernel(arr(base), float(r), arr(dd), k, h1, h2, ad1, ad2, a11, a12, a22,
                  out, mu1, mu2)
    return (out, (mu1, mu2)) if return_mu else out


def rounding_unit(size: int) -> float:
    """Relative error allowance for sums of at most ``size`` products."""
    return 4.0 * (size + 8) * np.finfo(float).eps


def certified_bounds(base, base_mag, dd, r, gamma, h=(), ad=(), aa=(),
                     h_mag=(), ad_mag=(), aa_mag=()):
    """Bounds of :func:`bound_from_gram` together with rounding allowances.

    ``*_mag`` hold the sums of absolute terms each Gram quantity was built
    from.  The quadratic form suffers cancellation, so its error enters the
    allowance through a square root.  Cut quantities may be scalars.

    Returns
    -------
    raw, upper : ndarray
        Bound and bound plus allowance.
    mu : tuple of ndarray
        Winning multipliers.
    """
    if len(h) > 2:
        raise ValueError("at most two cuts are supported")
    base = np.ascontiguousarray(base, dtype=float)

    zero = np.zeros(1)

    def arr(v):
        if type(v) is np.ndarray and v.dtype == np.float64 and v.ndim == 1 \
                and v.flags.c_contiguous:
            return v
        return np.ascontiguousarray(np.atleast_1d(np.asarray(v, dtype=float)))

    def pick(seq, k):
        return arr(seq[k]) if k < len(seq) else zero

    def pick2(seq, k, l):
        return arr(seq[k][l]) if max(k, l) < len(seq) else zero

    raw, upper = np.empty_like(base), np.empty_like(base)
    mu1, mu2 = np.empty_like(base), np.empty_like(base)
    _certified_kernel(base, arr(base_mag), arr(dd), float(r), float(gamma), len(h),
                      pick(h, 0), pick(h, 1), pick(ad, 0), pick(ad, 1),
                      pick2(aa, 0, 0), pick2(aa, 0, 1), pick2(aa, 1, 1),
                      pick(h_mag, 0), pick(h_mag, 1), pick(ad_mag, 0), pick(ad_mag, 1),
                      pick2(aa_mag, 0, 0), pick2(aa_mag, 0, 1), pick2(aa_mag, 1, 1),
                      raw, upper, mu1, mu2)
    return raw, upper, (mu1, mu2)


def _masked_quad(linv, g):
    """Row-wise ``g' L^-1 g`` with ``0 * inf := 0``."""
    nz = g != 0
    return np.sum(np.where(nz, linv * np.where(nz, g * g, 0.0), 0.0), axis=-1)


def explicit_bounds(center, linv, r, rows, cols, n, cuts, mus, gamma):
    """Lagrangian bound plus rounding allowance from explicit vectors.

    ``cuts`` is a list of ``(A, e, e_mag)`` with ``A`` of shape
    ``(K, n+m)`` or ``(n+m,)``; ``mus`` holds one length-``K`` multiplier
    array per cut.  Avoids the Gram cancellation of :func:`bound_from_gram`.
    """
    K = len(rows)
    N = center.size
    G = np.zeros((K, N))
    idx = np.arange(K)
    G[idx, rows] += 1.0
    G[idx, n + cols] += 1.0
    Gmag = G.copy()
    base = center[rows] + center[n + cols]
    val = base.copy()
    lin = np.abs(center[rows]) + np.abs(center[n + cols])
    for (A, e, e_mag), mu in zip(cuts, mus):
        mu = np.where(np.isfinite(mu), mu, 0.0)
        A = np.broadcast_to(A, (K, N))
        G -= mu[:, None] * A
        Gmag += mu[:, None] * np.abs(A)
        val += mu * (e - A @ center)
        lin += mu * (e_mag + np.abs(A) @ np.abs(center))
    val += r * np.sqrt(_masked_quad(linv, G))
    return val + gamma * lin + 2.0 * r * gamma * np.sqrt(_masked_quad(linv, Gmag))


# ---------------------------------------------------------------------------
# Scalar (dense) API
# ---------------------------------------------------------------------------

def _region_params(region):
    """Center, inverse metric and radius of a ball or ellipse."""
    if isinstance(region, BallRegion):
        return region.center, np.ones_like(region.center), region.radius
    if isinstance(region, EllipseRegion):
        with np.errstate(divide="ignore"):
            inv = np.where(region.metric > 0, 1.0 / region.metric, np.inf)
        return region.center, inv, math.sqrt(region.radius_sq)
    raise TypeError(f"unsupported region {type(region).__name__}")


def _dot(x, linv, y):
    """``x' L^-1 y`` with ``0 * inf := 0`` (coordinates outside both supports)."""
    prod = x * y
    nz = prod != 0
    return float(np.sum(prod[nz] * linv[nz]))


def _region_eval(p, region, n, m, halfspaces):
    """``(value, certified)``: bound at the best KKT multipliers and that bound plus its allowance."""
    i, j = pair_index(p, n, m)
    center, linv, r = _region_params(region)
    d = np.zeros(n + m)
    d[i] = d[n + j] = 1.0
    dd = linv[i] + linv[n + j]
    if not np.isfinite(dd):
        return math.inf, math.inf
    hs = [e.offset - float(e.normal @ center) for e in halfspaces]
    ad = [_dot(e.normal, linv, d) for e in halfspaces]
    aa = [[_dot(e.normal, linv, f.normal) for f in halfspaces] for e in halfspaces]
    _, mu = bound_from_gram(center[i] + center[n + j], r, dd, hs, ad, aa, return_mu=True)
    cuts = [(np.asarray(e.normal, dtype=float)[None, :], e.offset, abs(e.offset))
            for e in halfspaces]
    gamma = rounding_unit(n + m)
    certified = float(explicit_bounds(center, linv, r, np.array([i]), np.array([j]), n, cuts,
                                      [mu[k] for k in range(len(cuts))], gamma)[0])
    value = float(explicit_bounds(center, linv, r, np.array([i]), np.array([j]), n, cuts,
                                  [mu[k] for k in range(len(cuts))], 0.0)[0])
    return value, certified


def region_max(p, region, n, m, halfspaces=()):
    """Upper bound (exact for correct KKT guesses) of ``theta_i + theta_{n+j}``."""
    return _region_eval(p, region, n, m, halfspaces)[0]


def max_over_ball(p, ball: BallRegion, n, m) -> float:
    i, j = pair_index(p, n, m)
    return float(ball.center[i] + ball.center[n + j] + ball.radius * math.sqrt(2.0))


def max_over_ellipse(p, ellipse: EllipseRegion, n, m) -> float:
    """Cauchy-Schwarz in the ellipse metric: ``sqrt(r^2 (1/L_i + 1/L_j))``."""
    i, j = pair_index(p, n, m)
    Li, Lj = ellipse.metric[i], ellipse.metric[n + j]
    if ellipse.radius_sq == 0:
        return float(ellipse.center[i] + ellipse.center[n + j])
    if Li <= 0 or Lj <= 0:
        return math.inf
    return float(ellipse.center[i] + ellipse.center[n + j]
                 + math.sqrt(ellipse.radius_sq * (1.0 / Li + 1.0 / Lj)))


def dome_halfspace(t, spec: ProblemSpec, state: ScreeningState) -> Halfspace:
    """``sum_p t_p (x_p.theta - lam*c_p) <= 0``, i.e. ``(Xt).theta <= lam c.t``."""
    t = np.asarray(t, dtype=float)
    return Halfspace(apply_X(t, state), spec.lam * float(spec.c[state.active] @ t))


def ctp_halfspaces(p, t, spec: ProblemSpec, state: ScreeningState) -> HalfspacePair:
    """Split the dome cut of entry ``p`` into its row/column cross and the rest."""
    n, m = spec.n, spec.m
    i, j = pair_index(p, n, m)
    t = np.asarray(t, dtype=float)
    cross = (state.rows == i) | (state.cols == j)
    wt = spec.lam * spec.c[state.active] * t
    v = np.concatenate([np.bincount(state.rows[cross], t[cross], minlength=n),
                        np.bincount(state.cols[cross], t[cross], minlength=m)])
    w = np.concatenate([np.bincount(state.rows[~cross], t[~cross], minlength=n),
                        np.bincount(state.cols[~cross], t[~cross], minlength=m)])
    return HalfspacePair(v, float(wt[cross].sum()), w, float(wt[~cross].sum()))


def _dome_of(pair: HalfspacePair) -> Halfspace:
    return Halfspace(pair.primary_normal + pair.secondary_normal,
                     pair.primary_offset + pair.secondary_offset)


def ctp_max(p, region, pair: HalfspacePair, n, m) -> float:
    """Bound over ``region`` cut by both CTP half-spaces, never above the dome bound."""
    return min(region_max(p, region, n, m, pair.halfspaces),
               region_max(p, region, n, m, [_dome_of(pair)]))


# ---------------------------------------------------------------------------
# Vectorized bounds over all active entries
# ---------------------------------------------------------------------------

@dataclass
class _Aggregates:
    """Row/column sums shared by every entry's dome and CTP data.

    ``*_mag`` fields are sums of absolute terms, used for rounding allowances.
    """
    base: np.ndarray     # o_i + o_{n+j}
    base_mag: np.ndarray
    dd: np.ndarray       # linv_i + linv_{n+j}
    D: np.ndarray        # dome normal Xt
    D_ad: np.ndarray     # D' Linv d
    D_aa: float          # D' Linv D
    e_D: float           # lam c.t
    D_h: float           # e_D - D.o
    D_h_mag: float
    t: np.ndarray
    R: np.ndarray
    C: np.ndarray


@numba.njit(cache=True)
def _aggregate_kernel(rows, cols, t, lc, center, linv, n, m):
    K = t.size
    D = np.zeros(n + m)
    rowE = np.zeros(n)
    for p in range(K):
        D[rows[p]] += t[p]
        D[n + cols[p]] += t[p]
        rowE[rows[p]] += lc[p] * t[p]
    # Row-then-total summation keeps every partial sum within n+m terms.
    e_D = 0.0
    for i in range(n):
        e_D += rowE[i]
    D_aa, Dc, Dcm = 0.0, 0.0, 0.0
    for k in range(n + m):
        if D[k] != 0.0:
            D_aa += D[k] * D[k] * linv[k]
            Dc += D[k] * center[k]
            Dcm += D[k] * abs(center[k])
    base, base_mag = np.empty(K), np.empty(K)
    dd, D_ad = np.empty(K), np.empty(K)
    for p in range(K):
        i, j = rows[p], n + cols[p]
        base[p] = center[i] + center[j]
        base_mag[p] = abs(center[i]) + abs(center[j])
        dd[p] = linv[i] + linv[j]
        D_ad[p] = linv[i] * D[i] + linv[j] * D[j]
    return base, base_mag, dd, D, D_ad, D_aa, e_D, Dc, Dcm


def _aggregate(center, linv, t, spec, state):
    n = spec.n
    base, base_mag, dd, D, D_ad, D_aa, e_D, Dc, Dcm = _aggregate_kernel(
        state.rows, state.cols, t, spec.lam * spec.c[state.active], center, linv, n, spec.m)
    return _Aggregates(base, base_mag, dd, D, D_ad, D_aa, e_D, e_D - Dc, e_D + Dcm, t,
                       D[:n], D[n:])


@dataclass
class _CutData:
    """Gram data of a two-cut family (primary ``v_p`` and secondary ``D - v_p``)."""
    h: tuple
    ad: tuple
    aa: tuple
    h_mag: tuple
    ad_mag: tuple
    aa_mag: tuple


@numba.njit(cache=True)
def _ctp_gram(rows, cols, t, la, lb, oa, ob, lam_ct, R, C, D_aa, D_h, D_h_mag):
    n, m, K = la.size, lb.size, t.size
    colQ, rowQ = np.zeros(m), np.zeros(n)
    colRD, rowCD = np.zeros(m), np.zeros(n)
    colO, rowO = np.zeros(m), np.zeros(n)
    colOm, rowOm = np.zeros(m), np.zeros(n)
    colE, rowE = np.zeros(m), np.zeros(n)
    for p in range(K):
        i, j, tp = rows[p], cols[p], t[p]
        colQ[j] += la[i] * tp * tp
        rowQ[i] += lb[j] * tp * tp
        colRD[j] += la[i] * R[i] * tp
        rowCD[i] += lb[j] * C[j] * tp
        colO[j] += oa[i] * tp
        rowO[i] += ob[j] * tp
        colOm[j] += abs(oa[i]) * tp
        rowOm[i] += abs(ob[j]) * tp
        colE[j] += lam_ct[p]
        rowE[i] += lam_ct[p]
    h1, h2, ad1 = np.empty(K), np.empty(K), np.empty(K)
    a11, a12, a22 = np.empty(K), np.empty(K), np.empty(K)
    h1m, h2m = np.empty(K), np.empty(K)
    a11m, a12m, a22m = np.empty(K), np.empty(K), np.empty(K)
    for p in range(K):
        i, j, tp = rows[p], cols[p], t[p]
        li, lj, Ri, Cj = la[i], lb[j], R[i], C[j]
        t2 = tp * tp
        vv = (colQ[j] - li * t2 + li * Ri * Ri) + (rowQ[i] - lj * t2 + lj * Cj * Cj)
        vvm = colQ[j] + rowQ[i] + (li + lj) * t2 + li * Ri * Ri + lj * Cj * Cj
        vD = (colRD[j] - li * Ri * tp + li * Ri * Ri) + (rowCD[i] - lj * Cj * tp + lj * Cj * Cj)
        vDm = colRD[j] + rowCD[i] + li * Ri * (tp + Ri) + lj * Cj * (tp + Cj)
        vo = (colO[j] - oa[i] * tp + oa[i] * Ri) + (rowO[i] - ob[j] * tp + ob[j] * Cj)
        vom = colOm[j] + rowOm[i] + abs(oa[i]) * (tp + Ri) + abs(ob[j]) * (tp + Cj)
        e_v = rowE[i] + colE[j] - lam_ct[p]
        h1[p] = e_v - vo
        h1m[p] = rowE[i] + colE[j] + lam_ct[p] + vom
        h2[p] = D_h - h1[p]
        h2m[p] = D_h_mag + h1m[p]
        # The secondary cut has zero weight on i and n+j.
        ad1[p] = li * Ri + lj * Cj
        a11[p] = vv
        a12[p] = vD - vv
        a22[p] = D_aa - 2.0 * vD + vv
        a11m[p] = vvm
        a12m[p] = vDm + vvm
        a22m[p] = D_aa + 2.0 * vDm + vvm
    return h1, h2, ad1, a11, a12, a22, h1m, h2m, a11m, a12m, a22m


def _ctp_data(center, linv, agg, spec, state):
    """Gram data of the primary (cross) cut for every active entry, O(active)."""
    n = spec.n
    lam_ct = spec.lam * spec.c[state.active] * agg.t
    h1, h2, ad1, a11, a12, a22, h1m, h2m, a11m, a12m, a22m = _ctp_gram(
        state.rows, state.cols, agg.t, linv[:n], linv[n:], center[:n], center[n:], lam_ct,
        agg.R, agg.C, agg.D_aa, agg.D_h, agg.D_h_mag)
    return _CutData((h1, h2), (ad1, np.zeros(1)), ((a11, a12), (a12, a22)),
                    (h1m, h2m), (ad1, agg.D_ad), ((a11m, a12m), (a12m, a22m)))


def _random_split_data(center, linv, agg, spec, state, sel):
    n, m = spec.n, spec.m
    rows, cols, t = state.rows, state.cols, agg.t
    lam_ct = spec.lam * spec.c[state.active] * t
    v = np.concatenate([np.bincount(rows[sel], t[sel], minlength=n),
                        np.bincount(cols[sel], t[sel], minlength=m)])
    e_v = float(lam_ct[sel].sum())
    h1 = e_v - float(v @ center)
    h1_mag = e_v + float(v @ np.abs(center))
    li, lj = linv[rows], linv[n + cols]
    ad1 = li * v[rows] + lj * v[n + cols]
    vv, vD = _dot(v, linv, v), _dot(v, linv, agg.D)
    a22 = agg.D_aa - 2.0 * vD + vv
    return _CutData((h1, agg.D_h - h1), (ad1, agg.D_ad - ad1), ((vv, vD - vv), (vD - vv, a22)),
                    (h1_mag, agg.D_h_mag + h1_mag), (ad1, agg.D_ad + ad1),
                    ((vv, vD + vv), (vD + vv, agg.D_aa + 2.0 * vD + vv)))


def _ctp_normals(k_rows, k_cols, T, R, C, n):
    """Dense primary normals ``v_p`` for the entries ``(k_rows, k_cols)``."""
    K = len(k_rows)
    idx = np.arange(K)
    V = np.concatenate([T[:, k_cols].T, T[k_rows, :]], axis=1)
    V[idx, k_rows] = R[k_rows]
    V[idx, n + k_cols] = C[k_cols]
    return V


def region_bounds(region, cuts: str, t, spec: ProblemSpec, state: ScreeningState, rng=None):
    """Certified upper bounds of ``x_p.theta`` over ``region`` for all active entries.

    ``cuts`` is one of ``"none"``, ``"dome"``, ``"ctp"`` or ``"random"``.
    Each bound includes a rounding allowance; entries whose allowance
    straddles their threshold ``lam*c_p`` are re-evaluated from explicit
    vectors, which removes the Gram-form cancellation.
    """
    n, m = spec.n, spec.m
    center, linv, r = _region_params(region)
    touched = touched_coordinates(state)
    if np.any(~np.isfinite(linv[touched])):
        return np.full(state.n_active, np.inf)
    linv = np.where(touched, linv, 0.0)
    t = np.asarray(t, dtype=float)
    gamma = rounding_unit(n + m)
    agg = _aggregate(center, linv, t, spec, state)
    if cuts == "none":
        return certified_bounds(agg.base, agg.base_mag, agg.dd, r, gamma)[1]
    raw, upper, (mu_d, _) = certified_bounds(agg.base, agg.base_mag, agg.dd, r, gamma,
                                             (agg.D_h,), (agg.D_ad,), ((agg.D_aa,),),
                                             (agg.D_h_mag,), (agg.D_ad,), ((agg.D_aa,),))
    if cuts == "ctp":
        data = _ctp_data(center, linv, agg, spec, state)
    elif cuts == "random":
        rng = rng if rng is not None else np.random.default_rng()
        sel = rng.random(t.size) < 0.5
        data = _random_split_data(center, linv, agg, spec, state, sel)
    elif cuts != "dome":
        raise ValueError(f"unknown cut family {cuts!r}")
    if cuts != "dome":
        pair, pair_up, mu_c = certified_bounds(agg.base, agg.base_mag, agg.dd, r, gamma,
                                               data.h, data.ad, data.aa,
                                               data.h_mag, data.ad_mag, data.aa_mag)
        upper = np.minimum(upper, pair_up)
        raw = np.minimum(raw, pair)
    thr = spec.lam * spec.c[state.active] - SCREEN_MARGIN
    amb = np.flatnonzero((raw < thr) & (upper >= thr))
    if amb.size == 0:
        return upper
    rows, cols = state.rows[amb], state.cols[amb]
    dome_cut = (agg.D, agg.e_D, agg.e_D)
    refined = np.minimum(upper[amb], explicit_bounds(center, linv, r, rows, cols, n, [dome_cut],
                                                     [mu_d[amb]], gamma))
    if cuts == "ctp":
        T = state.inflate(t).reshape(n, m)
        LC = spec.lam * spec.c.reshape(n, m) * T
        rowE, colE = LC.sum(axis=1), LC.sum(axis=0)
        V = _ctp_normals(rows, cols, T, agg.R, agg.C, n)
        e_v = rowE[rows] + colE[cols] - LC[rows, cols]
        cut_list = [(V, e_v, e_v), (agg.D - V, agg.e_D - e_v, agg.e_D + e_v)]
    elif cuts == "random":
        v = np.concatenate([np.bincount(state.rows[sel], t[sel], minlength=n),
                            np.bincount(state.cols[sel], t[sel], minlength=m)])
        e_v = spec.lam * float(spec.c[state.active][sel] @ t[sel])
        cut_list = [(v, e_v, e_v), (agg.D - v, agg.e_D - e_v, agg.e_D + e_v)]
    if cuts != "dome":
        refined = np.minimum(refined, explicit_bounds(center, linv, r, rows, cols, n, cut_list,
                                                      [mu_c[0][amb], mu_c[1][amb]], gamma))
    upper = upper.copy()
    upper[amb] = refined
    return upper


_METHOD_PARTS = {
    "gap": ("gap", "none"), "dome": ("gap", "dome"), "gap-ctp": ("gap", "ctp"),
    "sa": ("sasvi", "dome"), "sa-ctp": ("sasvi", "ctp"), "sa-ran": ("sasvi", "random"),
    "ell": ("ellipse", "none"), "ell-ctp": ("ellipse", "ctp"),
}


def method_parts(method: str):
    return _METHOD_PARTS[method]


def kl_curvature(theta_tilde, t, spec, state):
    """Box, blockwise metric and its minimum over coordinates touched by active entries."""
    box = kl_box(theta_tilde, t, spec, state)
    metric = blockwise_metric(box, spec.y)
    touched = touched_coordinates(state)
    metric = np.where(touched, metric, 0.0)
    L_min = float(metric[touched].min()) if np.any(touched) else 0.0
    return box, metric, L_min


def build_region(kind: str, theta_tilde, gap, t, spec, state, curvature=None):
    """Safe region of the given kind (``gap``, ``sasvi`` or ``ellipse``), or None if unavailable."""
    if kind == "sasvi":
        return sasvi_ball(theta_tilde, spec.y, spec.penalty)
    if spec.penalty is Penalty.L2:
        if kind == "gap":
            return gap_ball(theta_tilde, gap, 1.0)
        raise UnsupportedError("ellipse regions are built for the KL penalty")
    if spec.penalty is not Penalty.KL:
        raise UnsupportedError(f"no safe region for the {spec.penalty.value} penalty")
    if curvature is None:
        curvature = kl_curvature(theta_tilde, t, spec, state)
    _, metric, L_min = curvature
    touched = touched_coordinates(state)
    if not (L_min > 0) or not np.all(np.isfinite(metric[touched])):
        return None
    if kind == "gap":
        return gap_ball(theta_tilde, gap, L_min)
    return gap_ellipse(theta_tilde, gap, metric)


def screen_element(p, region, method: str, t, spec: ProblemSpec, state: ScreeningState) -> bool:
    """Dense single-entry test (reference path for :func:`screen_all`).

    Uses certified bounds (value plus rounding allowance), like the batch path.
    """
    check_supported(method, spec.penalty)
    if method == "none":
        return False
    _, cuts = method_parts(method)
    n, m = spec.n, spec.m
    if cuts == "none":
        bound = _region_eval(p, region, n, m, [])[1]
    elif cuts == "dome":
        bound = _region_eval(p, region, n, m, [dome_halfspace(t, spec, state)])[1]
    elif cuts == "ctp":
        pair = ctp_halfspaces(p, t, spec, state)
        bound = min(_region_eval(p, region, n, m, pair.halfspaces)[1],
                    _region_eval(p, region, n, m, [_dome_of(pair)])[1])
    else:
        raise UnsupportedError("random splits are only evaluated in batch")
    return bool(bound < spec.lam * spec.c[p] - SCREEN_MARGIN)


def safe_gap(gap, primal, dual, spec) -> float:
    """Gap inflated by a rounding allowance so tiny gaps cannot over-shrink regions."""
    scale = abs(primal) + abs(dual) + float(spec.y.sum())
    return max(float(gap), 0.0) + 32 * np.finfo(float).eps * scale


def screen_all(theta_tilde, t, gap, spec: ProblemSpec, state: ScreeningState, method: str,
               rng=None, primal=None, dual=None):
    """Test every active entry once and delete the screened ones.

    Returns ``(report, new_state, t_active)``; ``t`` must be the active plan
    the region was built from and ``theta_tilde`` a feasible dual point.
    """
    check_supported(method, spec.penalty)
    if method == "none" or state.n_active == 0:
        return ScreenReport(state.n_active, 0), state, t
    if primal is not None and dual is not None:
        gap = safe_gap(gap, primal, dual, spec)
    kind, cuts = method_parts(method)
    flags = []
    region = build_region(kind, theta_tilde, gap, t, spec, state)
    if region is None:
        return ScreenReport(state.n_active, 0, flags=("no-curvature",)), state, t
    bounds = region_bounds(region, cuts, t, spec, state, rng)
    caps = spec.lam * spec.c[state.active]
    hit = bounds < caps - SCREEN_MARGIN
    newly = state.active[hit]
    new_state, t_new, _ = compact(state, newly, t)
    return (ScreenReport(state.n_active, int(hit.sum()), newly, bounds, tuple(flags)),
            new_state, t_new)

"""Stein's unbiased risk estimate for proximal shrinkage, and its minimization.

    SURE(lam, theta, Sigma) = tr(Sigma) + ||g(theta)||^2 + 2 tr(grad_g(theta) Sigma)

At Lasso kinks the Jacobian is taken from the segment to the right of
``lam`` (right limit), so SURE is right-continuous in ``lam``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .shrinkage import PenaltySpec, _check, _finite, lasso_active_jacobian, prox

log = logging.getLogger(__name__)

ALL_NONNEG = "all"
TIE_TOL = 1e-10
RIDGE_GRID = (1e-4, 1e6, 200)
GOLDEN_TOL = 1e-8
DEGENERATE_GAP = 1e-10


class DegenerateBreakpointWarning(UserWarning):
    pass


def _sigma(sigma, k) -> np.ndarray:
    S = _finite("sigma", sigma)
    S = np.atleast_2d(S)
    if S.shape != (k, k):
        raise InvalidInputError(f"sigma must be {k}x{k}, got {S.shape}")
    if not np.allclose(S, S.T, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise InvalidInputError("sigma must be symmetric")
    if k and np.linalg.eigvalsh(0.5 * (S + S.T)).min() < -1e-10:
        raise InvalidInputError("sigma must be positive semi-definite")
    return S


# ---------------------------------------------------------------------------
# Segment structure of the Lasso path
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SegmentList:
    """Breakpoints of the Lasso path in ``lam`` and the sign pattern between them.

    ``eta_per_segment[i]`` holds the sign pattern on the open interval
    ``(breakpoints[i-1], breakpoints[i])`` (with ``breakpoints[-1] := 0``);
    the last row is the all-zero pattern on ``[breakpoints[-1], inf)``.
    """

    breakpoints: np.ndarray
    eta_per_segment: np.ndarray
    curvature_per_segment: np.ndarray
    degenerate: bool = False

    @property
    def n_segments(self) -> int:
        return len(self.eta_per_segment)

    def segment_index(self, lam: float) -> int:
        """Index of the segment immediately to the right of ``lam``."""
        bp = self.breakpoints
        tol = 1e-12 * max(1.0, float(bp[-1]))
        return int(np.searchsorted(bp, lam + tol, side="right"))

    def eta_right_of(self, lam: float) -> np.ndarray:
        return self.eta_per_segment[self.segment_index(lam)]


def _curvature(A, eta) -> float:
    J = np.flatnonzero(eta)
    if J.size == 0:
        return 0.0
    AJ = A[:, J]
    return float(eta[J] @ np.linalg.solve(AJ.T @ AJ, eta[J]))


def lasso_breakpoints(penalty: PenaltySpec, theta) -> SegmentList:
    """Trace the Lasso path from ``lam_max = ||A'theta||_inf`` down to zero.

    Within a segment ``h_J(lam) = (A_J'A_J)^{-1}(A_J'theta - lam eta_J)``, so the
    next event is the largest ``lam`` below the current one at which either an
    active coefficient hits zero or an inactive correlation reaches ``lam``.
    """
    if penalty.is_ridge:
        raise InvalidInputError("breakpoints are defined for Lasso penalties only")
    _, theta = _check(penalty, 0.0, theta)
    A = penalty.A
    k = penalty.k
    G = penalty._gram
    b = A.T @ theta
    lam = float(np.abs(b).max())
    zeros = np.zeros(k)
    if lam == 0.0:
        return SegmentList(np.array([0.0]), np.array([zeros, zeros]), np.zeros(2))

    eta = zeros.copy()
    j0 = int(np.argmax(np.abs(b)))
    eta[j0] = np.sign(b[j0])
    bps = [lam]
    etas = [eta.copy()]  # pattern just below each breakpoint
    changed_here = {j0}  # indices that already changed at the current breakpoint
    scale = lam
    same = 1e-12 * scale

    def admissible(lc, j, lam):
        if not (0 < lc <= lam + same):
            return False
        return not (j in changed_here and lc > lam - 1e-9 * scale)

    for _ in range(10 * 3**k):
        J = np.flatnonzero(eta)
        if J.size:
            GJ = G[np.ix_(J, J)]
            u = np.linalg.solve(GJ, b[J])
            v = np.linalg.solve(GJ, eta[J])
        else:
            u = v = np.zeros(0)
        events = []  # (lam, index, new sign)
        for pos, j in enumerate(J):
            if v[pos] != 0:
                lc = u[pos] / v[pos]
                if admissible(lc, j, lam):
                    events.append((min(lc, lam), j, 0.0))
        off = np.setdiff1d(np.arange(k), J)
        if off.size:
            GoJ = G[np.ix_(off, J)]
            alpha = b[off] - GoJ @ u
            beta = GoJ @ v
            for pos, j in enumerate(off):
                for s in (1.0, -1.0):
                    denom = s - beta[pos]
                    if denom == 0:
                        continue
                    lc = alpha[pos] / denom
                    if admissible(lc, j, lam):
                        events.append((min(lc, lam), j, s))
        if not events:
            break
        lc, j, s = max(events, key=lambda e: e[0])
        eta[j] = s
        if lam - lc <= same:
            # simultaneous event: same breakpoint, pattern below it updated
            etas[-1] = eta.copy()
            changed_here.add(j)
        else:
            bps.append(lc)
            etas.append(eta.copy())
            changed_here = {j}
            lam = lc

    gaps = -np.diff(bps)
    degenerate = bool(np.any(gaps < DEGENERATE_GAP))
    if degenerate:
        i = int(np.argmin(gaps))
        warnings.warn(
            f"degenerate crossing near lambda={bps[i]:.12g}: breakpoints closer than {DEGENERATE_GAP}",
            DegenerateBreakpointWarning,
            stacklevel=2,
        )
    bps = np.array(bps[::-1])
    # etas[i] was the pattern below bps_desc[i]; ascending order puts the
    # pattern on (bps[i-1], bps[i]) at position i, followed by the zero tail.
    eta_seg = np.array(etas[::-1] + [zeros])
    curv = np.array([_curvature(A, e) for e in eta_seg])
    return SegmentList(bps, eta_seg, curv, degenerate)


def lasso_segment_sure(penalty: PenaltySpec, theta, sigma, lam, eta) -> float:
    """SURE at ``lam`` using the closed form of the segment with pattern ``eta``."""
    A = penalty.A
    J = np.flatnonzero(eta)
    if J.size:
        AJ = A[:, J]
        hJ = np.linalg.solve(AJ.T @ AJ, AJ.T @ theta - lam * eta[J])
        g = AJ @ hJ - theta
    else:
        g = -theta
    D = lasso_active_jacobian(A, eta)
    return float(np.trace(sigma) + g @ g + 2.0 * np.sum(D * sigma.T))


# ---------------------------------------------------------------------------
# SURE evaluation
# ---------------------------------------------------------------------------


def _ridge_parts(penalty: PenaltySpec, theta, sigma):
    Q = penalty._eigvecs
    phi2 = (Q.T @ theta) ** 2
    sdiag = np.einsum("ij,jk,ki->i", Q.T, sigma, Q)
    return phi2, sdiag


def ridge_sure_values(penalty: PenaltySpec, theta, sigma, lambdas) -> np.ndarray:
    """Vectorized Ridge SURE over an array of ``lam`` values (eigenbasis of A)."""
    phi2, sdiag = _ridge_parts(penalty, theta, sigma)
    f = penalty.ridge_shrink_factors(np.asarray(lambdas, dtype=float))
    return np.trace(sigma) + (f**2) @ phi2 - 2.0 * f @ sdiag


def sure(penalty: PenaltySpec, lam, theta, sigma) -> float:
    """SURE(lam, theta, Sigma); Lasso kinks are evaluated as right limits.

    Examples
    --------
    >>> sure(PenaltySpec.ridge(np.eye(2)), 0.0, [1.0, 2.0], np.eye(2))
    2.0
    """
    lam, theta = _check(penalty, lam, theta)
    sigma = _sigma(sigma, penalty.k)
    if lam == 0:
        return float(np.trace(sigma))
    if not penalty.is_ridge:
        return float(lasso_sure_values(penalty, theta, sigma, [lam])[0])
    res = prox(penalty, lam, theta)
    return float(np.trace(sigma) + res.g @ res.g + 2.0 * np.sum(res.grad_g * sigma.T))


def lasso_sure_values(penalty: PenaltySpec, theta, sigma, lambdas) -> np.ndarray:
    """Lasso SURE over a grid, each point on the segment to its right.

    The sign pattern is read off the homotopy breakpoints rather than from a
    numerical prox solve, so a grid point sitting on a kink is always assigned
    the right limit, whatever the scale of ``theta``.
    """
    sigma = _sigma(sigma, penalty.k)
    segments = lasso_breakpoints(penalty, theta)
    out = np.empty(len(lambdas))
    for i, lam in enumerate(lambdas):
        if lam == 0:
            out[i] = float(np.trace(sigma))
        else:
            out[i] = lasso_segment_sure(penalty, theta, sigma, lam, segments.eta_right_of(lam))
    return out


@dataclass(frozen=True, eq=False)
class SureCurve:
    lambdas: np.ndarray
    values: np.ndarray
    penalty: PenaltySpec
    theta: np.ndarray
    sigma: np.ndarray

    def figure_values(self) -> np.ndarray:
        """Values offset by ``k``, the convention used when plotting bias^2 + 2 df."""
        return self.values + self.penalty.k


def sure_curve(penalty: PenaltySpec, theta, sigma, lambdas) -> SureCurve:
    _, theta = _check(penalty, 0.0, theta)
    sigma = _sigma(sigma, penalty.k)
    lambdas = _finite("lambdas", lambdas).reshape(-1)
    if lambdas.size == 0:
        raise InvalidInputError("lambda grid is empty")
    if np.any(np.diff(lambdas) <= 0) or lambdas[0] < 0:
        raise InvalidInputError("lambda grid must be non-negative and strictly increasing")
    if penalty.is_ridge:
        vals = ridge_sure_values(penalty, theta, sigma, lambdas)
    else:
        vals = lasso_sure_values(penalty, theta, sigma, lambdas)
    return SureCurve(lambdas, vals, penalty, theta, sigma)


# ---------------------------------------------------------------------------
# Minimization
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SureMinimum:
    lambda_star: float
    sure_star: float
    saturated: bool = False
    flat_tail: bool = False
    candidates: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))

    def __iter__(self):
        return iter((self.lambda_star, self.sure_star))


def _tie_break(lams, vals, tol=TIE_TOL) -> int:
    """Index of the smallest ``lam`` whose value is within ``tol`` of the minimum."""
    lams = np.asarray(lams)
    vals = np.asarray(vals)
    tied = np.flatnonzero(vals <= vals.min() + tol)
    return int(tied[np.argmin(lams[tied])])


_INV_PHI = (math.sqrt(5) - 1) / 2


def golden_section(f, a, b, tol=GOLDEN_TOL, max_iter=500):
    """Minimize a unimodal ``f`` on ``[a, b]`` to interval width ``tol``.

    Returns ``(x, f(x))`` for the best point evaluated.
    """
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def _ridge_local_minima(penalty, theta, sigma):
    """Refined local minima of Ridge SURE on ``[0, 1e6]``; returns (lams, vals, saturated_idx)."""
    lo, hi, num = RIDGE_GRID
    grid = np.concatenate([[0.0], np.logspace(math.log10(lo), math.log10(hi), num)])
    phi2, sdiag = _ridge_parts(penalty, theta, sigma)
    trs = float(np.trace(sigma))
    w = penalty._eigvals

    def f(lam):
        s = lam / (w + lam)
        return trs + float(s * s @ phi2) - 2.0 * float(s @ sdiag)

    vals = ridge_sure_values(penalty, theta, sigma, grid)
    last = len(grid) - 1
    lams, out, sat = [], [], []
    for i in range(len(grid)):
        left_ok = i == 0 or vals[i] <= vals[i - 1]
        right_ok = i == last or vals[i] <= vals[i + 1]
        if not (left_ok and right_ok):
            continue
        if i == 0 or i == last:
            lams.append(grid[i])
            out.append(vals[i])
            sat.append(i == last)
            continue
        x, fx = golden_section(f, grid[i - 1], grid[i + 1])
        if fx > vals[i]:
            x, fx = grid[i], vals[i]
        lams.append(x)
        out.append(fx)
        sat.append(False)
    return np.array(lams), np.array(out), np.array(sat), grid, vals


def _lasso_candidates(penalty, theta, sigma, segs: SegmentList | None = None):
    segs = segs or lasso_breakpoints(penalty, theta)
    lams = [0.0]
    vals = [float(np.trace(sigma))]
    for i, bp in enumerate(segs.breakpoints):
        if bp == 0.0:
            continue
        lams.append(float(bp))
        vals.append(lasso_segment_sure(penalty, theta, sigma, bp, segs.eta_per_segment[i + 1]))
    tail = 2.0 * segs.breakpoints[-1] + 1.0
    lams.append(tail)
    vals.append(lasso_segment_sure(penalty, theta, sigma, tail, segs.eta_per_segment[-1]))
    return np.array(lams), np.array(vals), segs


def minimize_sure(penalty: PenaltySpec, theta, sigma, lambda_set=ALL_NONNEG) -> SureMinimum:
    """Global minimizer of SURE over ``lambda_set``, smallest ``lam`` among ties.

    ``lambda_set`` is ``"all"`` (all of R+) or a finite grid. For Ridge on R+ a
    log grid on [1e-4, 1e6] (plus 0) seeds golden-section refinement of every
    basin; a minimum at the upper end is reported as ``saturated``. For Lasso
    on R+ the candidates are 0 and the right limits at every breakpoint.
    """
    _, theta = _check(penalty, 0.0, theta)
    sigma = _sigma(sigma, penalty.k)

    if not (isinstance(lambda_set, str) and lambda_set == ALL_NONNEG):
        grid = _finite("lambda grid", lambda_set).reshape(-1)
        if grid.size == 0:
            raise InvalidInputError("lambda grid is empty")
        if np.any(grid < 0):
            raise InvalidInputError("lambda grid must be non-negative")
        if penalty.is_ridge:
            vals = ridge_sure_values(penalty, theta, sigma, grid)
        else:
            vals = lasso_sure_values(penalty, theta, sigma, grid)
        i = _tie_break(grid, vals)
        return SureMinimum(float(grid[i]), float(vals[i]), candidates=np.column_stack([grid, vals]))

    if penalty.is_ridge:
        lams, vals, sat, _, _ = _ridge_local_minima(penalty, theta, sigma)
        i = _tie_break(lams, vals)
        return SureMinimum(
            float(lams[i]), float(vals[i]), saturated=bool(sat[i]),
            candidates=np.column_stack([lams, vals]),
        )

    lams, vals, segs = _lasso_candidates(penalty, theta, sigma)
    i = _tie_break(lams, vals)
    lam_star = float(lams[i])
    flat = bool(np.any(theta != 0) and lam_star >= segs.breakpoints[-1])
    return SureMinimum(lam_star, float(vals[i]), flat_tail=flat,
                       candidates=np.column_stack([lams, vals]))


# ---------------------------------------------------------------------------
# Structural diagnostics
# ---------------------------------------------------------------------------


def supermodularity_gap(penalty: PenaltySpec, nu, r_grid, lambda_grid, sigma) -> float:
    """Smallest double difference of SURE(lam, R nu) over adjacent (lam, R) cells."""
    if not penalty.is_ridge:
        raise InvalidInputError("supermodularity is checked for Ridge penalties")
    _, nu = _check(penalty, 0.0, nu)
    sigma = _sigma(sigma, penalty.k)
    R = _finite("Rgrid", r_grid).reshape(-1)
    L = _finite("lambda grid", lambda_grid).reshape(-1)
    if R.size < 2 or L.size < 2:
        raise InvalidInputError("grids need at least two points")
    if np.any(np.diff(R) < 0) or np.any(np.diff(L) <= 0):
        raise InvalidInputError("grids must be increasing")
    S = np.array([ridge_sure_values(penalty, r * nu, sigma, L) for r in R])
    dd = (S[1:, 1:] - S[1:, :-1]) - (S[:-1, 1:] - S[:-1, :-1])
    return float(dd.min())


@dataclass(frozen=True)
class SawtoothPoint:
    R: float
    lambda_star: float
    segment_index: int

    @property
    def lambda_over_r(self) -> float:
        return self.lambda_star / self.R


def sawtooth_profile(penalty: PenaltySpec, nu, r_grid, sigma) -> list[SawtoothPoint]:
    """Tuned ``lam*(R nu)`` along a ray, with its index among the unit-ray candidates.

    Candidates on the unit ray are ``[0, lam_1, ..., lam_m]``; the returned
    ``segment_index`` points into that list. Raises ``AssertionError`` if
    ``lam*/R`` is not a unit-ray candidate or the index increases with R.
    """
    if penalty.is_ridge:
        raise InvalidInputError("sawtooth profile is defined for Lasso penalties only")
    _, nu = _check(penalty, 0.0, nu)
    sigma = _sigma(sigma, penalty.k)
    R = _finite("Rgrid", r_grid).reshape(-1)
    if np.any(R <= 0) or np.any(np.diff(R) <= 0):
        raise InvalidInputError("Rgrid must be positive and increasing")
    unit = np.concatenate([[0.0], lasso_breakpoints(penalty, nu).breakpoints])
    out = []
    prev = None
    for r in R:
        m = minimize_sure(penalty, r * nu, sigma)
        ratio = m.lambda_star / r
        j = int(np.argmin(np.abs(unit - ratio)))
        assert abs(unit[j] - ratio) <= 1e-9 * max(1.0, unit[j]), (
            f"lambda*/R = {ratio!r} is not a unit-ray breakpoint"
        )
        assert prev is None or j <= prev, f"segment index increased at R={r}"
        prev = j
        out.append(SawtoothPoint(float(r), m.lambda_star, j))
    return out


def well_separation(penalty: PenaltySpec, theta, sigma, lambda_star, epsilon) -> float:
    """``inf`` of SURE outside ``[lam* - eps, lam* + eps]`` minus SURE(lam*)."""
    _, theta = _check(penalty, 0.0, theta)
    sigma = _sigma(sigma, penalty.k)
    eps = float(epsilon)
    if eps <= 0:
        raise InvalidInputError("epsilon must be positive")
    lam_star = float(lambda_star)
    s_star = sure(penalty, lam_star, theta, sigma)

    if penalty.is_ridge:
        lams, vals, _, grid, gvals = _ridge_local_minima(penalty, theta, sigma)
        pts = np.concatenate([lams, grid])
        v = np.concatenate([vals, gvals])
        edges = [x for x in (lam_star - eps, lam_star + eps) if 0 <= x <= RIDGE_GRID[1]]
        pts = np.concatenate([pts, edges])
        v = np.concatenate([v, ridge_sure_values(penalty, theta, sigma, edges)])
    else:
        lams, vals, _ = _lasso_candidates(penalty, theta, sigma)
        edges = [x for x in (lam_star - eps, lam_star + eps) if x >= 0]
        pts = np.concatenate([lams, edges])
        v = np.concatenate([vals, lasso_sure_values(penalty, theta, sigma, edges)])
    outside = np.abs(pts - lam_star) >= eps * (1 - 1e-12)
    if not outside.any():
        return math.inf
    return float(v[outside].min() - s_star)


def scaled_sure(penalty: PenaltySpec, lam, R, nu, sigma) -> float:
    """Right-hand side of the Lasso scaling identity, ``SURE(R lam, R nu)``."""
    lam, nu = _check(penalty, lam, nu)
    sigma = _sigma(sigma, penalty.k)
    if penalty.is_ridge or lam == 0:
        res = prox(penalty, lam, nu)
        g, D = res.g, res.grad_g
    else:
        eta = lasso_breakpoints(penalty, nu).eta_right_of(lam)
        A = penalty.A
        J = np.flatnonzero(eta)
        g = -nu
        if J.size:
            AJ = A[:, J]
            g = AJ @ np.linalg.solve(AJ.T @ AJ, AJ.T @ nu - lam * eta[J]) - nu
        D = lasso_active_jacobian(A, eta)
    return float(np.trace(sigma) + R**2 * (g @ g) + 2.0 * np.sum(D * sigma.T))

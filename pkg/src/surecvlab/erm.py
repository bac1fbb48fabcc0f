"""Finite-sample estimation in local coordinates ``theta = sqrt(n) * beta``.

The empirical objective is ``L_n(theta) = sum_i l(theta / sqrt(n), Z_i)``.
Leave-one-out objectives drop one term but keep the full-sample ``sqrt(n)``,
so every estimate in this module lives on the same scale.

Two loss models are supported:

* ``linear``: ``l(beta, Z) = 1/2 (Y - W beta)^2``
* ``logistic``: ``l(beta, Z) = log(1 + exp(W beta)) - Y W beta`` with ``Y`` in {0, 1}
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConvergenceError, InvalidInputError, RankDeficientError
from .shrinkage import (
    KKT_TOL,
    PenaltySpec,
    _finite,
    prox,
    solve_lasso_quadratic,
)

log = logging.getLogger(__name__)

LINEAR = "linear"
LOGISTIC = "logistic"
STRONG_CONVEXITY_TOL = 1e-8
GRAD_TOL = 1e-10
COMPOSITE_TOL = 1e-9
MAX_NEWTON = 200
MAX_PROX_GRAD = 100_000


@dataclass(frozen=True)
class LossModel:
    kind: str
    k: int

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in (LINEAR, LOGISTIC):
            raise InvalidInputError(f"unknown loss model {self.kind!r}")
        if int(self.k) < 1:
            raise InvalidInputError("feature dimension must be positive")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "k", int(self.k))

    @classmethod
    def linear(cls, k: int) -> "LossModel":
        return cls(LINEAR, k)

    @classmethod
    def logistic(cls, k: int) -> "LossModel":
        return cls(LOGISTIC, k)

    def losses(self, beta, W, Y) -> np.ndarray:
        """Per-observation losses ``l(beta, Z_i)``."""
        u = W @ beta
        if self.kind == LINEAR:
            return 0.5 * (Y - u) ** 2
        return np.logaddexp(0.0, u) - Y * u

    def residual_weights(self, beta, W, Y):
        """``(r, w)`` with per-observation gradient ``-r_i W_i`` and Hessian ``w_i W_i W_i'``."""
        u = W @ beta
        if self.kind == LINEAR:
            return Y - u, np.ones_like(u)
        p = expit(u)
        return Y - p, p * (1.0 - p)


@dataclass(frozen=True, eq=False)
class Dataset:
    W: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        W = _finite("W", self.W)
        Y = _finite("Y", self.Y).reshape(-1)
        if W.ndim != 2 or W.shape[0] != Y.size:
            raise InvalidInputError(f"W must be n x k with n = len(Y); got {W.shape} and {Y.size}")
        if W.shape[0] <= W.shape[1]:
            raise InvalidInputError(f"need n > k, got n={W.shape[0]}, k={W.shape[1]}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def k(self) -> int:
        return self.W.shape[1]

    def without(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        keep = np.arange(self.n) != i
        return self.W[keep], self.Y[keep]


@dataclass(frozen=True, eq=False)
class InfluenceBundle:
    """Influence-function quantities at ``theta0``.

    Attributes
    ----------
    theta_tilde : ndarray
        ``theta0 + n^{-1/2} sum_i X_i``.
    scores : ndarray
        Rows ``X_i = -grad_beta l(theta0 / sqrt(n), Z_i)``, premultiplied by the
        inverse sample Hessian when ``standardized``.
    sigma_hat : ndarray
        ``(1/n) sum_i X_i X_i'``.
    """

    theta_tilde: np.ndarray
    scores: np.ndarray
    sigma_hat: np.ndarray
    theta0_source: str = "known"
    standardized: bool = False


# ---------------------------------------------------------------------------
# Objective in local coordinates
# ---------------------------------------------------------------------------


class _Objective:
    """``L(theta) = sum_i l(theta / root_n, Z_i)`` over the rows supplied."""

    def __init__(self, model: LossModel, W, Y, root_n: float):
        self.model, self.W, self.Y, self.root_n = model, W, Y, root_n

    def value(self, theta) -> float:
        return float(self.model.losses(theta / self.root_n, self.W, self.Y).sum())

    def grad(self, theta) -> np.ndarray:
        r, _ = self.model.residual_weights(theta / self.root_n, self.W, self.Y)
        return -(self.W.T @ r) / self.root_n

    def hess(self, theta) -> np.ndarray:
        _, w = self.model.residual_weights(theta / self.root_n, self.W, self.Y)
        return (self.W.T * w) @ self.W / self.root_n**2


def _objective(model: LossModel, data: Dataset) -> _Objective:
    if data.k != model.k:
        raise InvalidInputError(f"data has k={data.k}, model expects k={model.k}")
    return _Objective(model, data.W, data.Y, math.sqrt(data.n))


def _require_strongly_convex(H, what="Hessian"):
    mu = float(np.linalg.eigvalsh(0.5 * (H + H.T)).min())
    if mu <= STRONG_CONVEXITY_TOL:
        raise RankDeficientError(
            mu, f"{what} is not strongly convex: smallest eigenvalue {mu:.3e} <= {STRONG_CONVEXITY_TOL}"
        )
    return mu


def _ridge_terms(penalty, lam):
    if penalty is None or lam == 0:
        return None
    return lam * penalty.inverse_A()


def _newton(obj: _Objective, theta0, P=None, tol=GRAD_TOL):
    """Damped Newton on ``L(theta) + 1/2 theta' P theta``."""
    theta = np.array(theta0, dtype=float)
    P = np.zeros((theta.size, theta.size)) if P is None else P

    def F(t):
        return obj.value(t) + 0.5 * t @ P @ t

    f = F(theta)
    gnorm = math.inf
    for _ in range(MAX_NEWTON):
        grad = obj.grad(theta) + P @ theta
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            return theta, gnorm
        H = obj.hess(theta) + P
        step = np.linalg.solve(H, grad)
        dec = float(grad @ step)
        t = 1.0
        cand = theta - step
        fc = F(cand)
        if dec > 1e-12 * max(1.0, abs(f)):
            # Armijo backtracking; skipped once the predicted decrease is below
            # the rounding level of the objective, where full Newton steps are safe.
            while fc > f - 0.25 * t * dec and t >= 1e-12:
                t *= 0.5
                cand = theta - t * step
                fc = F(cand)
        if t < 1e-12 or np.array_equal(cand, theta):
            break
        theta, f = cand, fc
    grad = obj.grad(theta) + P @ theta
    gnorm = float(np.linalg.norm(grad))
    if gnorm <= tol:
        return theta, gnorm
    raise ConvergenceError(f"Newton iterations stalled with gradient norm {gnorm:.3e}", residual=gnorm)


def _linear_system(obj: _Objective):
    """``(H, c)`` with ``L(theta) = const + 1/2 theta'H theta - c'theta`` for the linear model."""
    H = obj.W.T @ obj.W / obj.root_n**2
    c = obj.W.T @ obj.Y / obj.root_n
    return H, c


def _lasso_linear(obj, penalty, lam, theta_start=None):
    H, c = _linear_system(obj)
    A = penalty.A
    G = A.T @ H @ A
    b = A.T @ c
    h0 = None if theta_start is None else penalty.solve_A(theta_start)
    h, _ = solve_lasso_quadratic(G, b, lam, h0=h0, tol=KKT_TOL)
    return A @ h


def _composite_residual(obj, penalty, lam, theta):
    return float(np.linalg.norm(theta - prox(penalty, lam, theta - obj.grad(theta)).fitted))


def _lasso_prox_grad(obj, penalty, lam, theta_start):
    """Proximal gradient with backtracking on ``L(theta) + lam ||A^{-1} theta||_1``."""
    theta = np.array(theta_start, dtype=float)
    t = 1.0
    f = obj.value(theta)
    for _ in range(MAX_PROX_GRAD):
        grad = obj.grad(theta)
        while True:
            cand = prox(penalty, t * lam, theta - t * grad).fitted
            d = cand - theta
            fc = obj.value(cand)
            if fc <= f + grad @ d + (d @ d) / (2 * t) + 1e-14 * abs(f) or t < 1e-12:
                break
            t *= 0.5
        theta, f = cand, fc
        if np.linalg.norm(d) / t <= COMPOSITE_TOL:
            res = _composite_residual(obj, penalty, lam, theta)
            if res <= COMPOSITE_TOL:
                return theta
        t = min(1.0, 2 * t)
    res = _composite_residual(obj, penalty, lam, theta)
    raise ConvergenceError(f"proximal gradient did not converge (residual {res:.3e})", residual=res)


def _fit(obj: _Objective, penalty: PenaltySpec | None, lam: float, start=None) -> np.ndarray:
    k = obj.W.shape[1]
    model = obj.model
    unpenalized = penalty is None or lam == 0

    if model.kind == "linear":
        H, c = _linear_system(obj)
        if unpenalized:
            _require_strongly_convex(H)
            beta, *_ = np.linalg.lstsq(obj.W, obj.Y, rcond=None)
            return obj.root_n * beta
        if penalty.is_ridge:
            K = H + _ridge_terms(penalty, lam)
            _require_strongly_convex(K, "penalized Hessian")
            return np.linalg.solve(K, c)
        _require_strongly_convex(H)
        return _lasso_linear(obj, penalty, lam, start)

    start = np.zeros(k) if start is None else start
    if unpenalized:
        theta, _ = _newton(obj, start)
        _require_strongly_convex(obj.hess(theta))
        return theta
    if penalty.is_ridge:
        P = _ridge_terms(penalty, lam)
        theta, _ = _newton(obj, start, P)
        _require_strongly_convex(obj.hess(theta) + P, "penalized Hessian")
        return theta
    theta = _lasso_prox_grad(obj, penalty, lam, start)
    _require_strongly_convex(obj.hess(theta))
    return theta


def _check_lambda(lam):
    lam = float(lam)
    if not np.isfinite(lam) or lam < 0:
        raise InvalidInputError(f"lambda must be finite and >= 0, got {lam}")
    return lam


# ---------------------------------------------------------------------------
# Public fits
# ---------------------------------------------------------------------------


def fit_erm(model: LossModel, data: Dataset) -> np.ndarray:
    """Unpenalized minimizer of ``L_n`` in local scale.

    Examples
    --------
    >>> W = np.array([[1.0], [2.0], [3.0]]); Y = 2 * W[:, 0]
    >>> float(fit_erm(LossModel.linear(1), Dataset(W, Y))[0] / np.sqrt(3))
    2.0
    """
    return _fit(_objective(model, data), None, 0.0)


def fit_penalized(model: LossModel, data: Dataset, penalty: PenaltySpec, lam, start=None) -> np.ndarray:
    """Minimizer of ``L_n(theta) + lam * pi(theta)`` in local scale.

    ``start`` warm-starts the iterative solvers.
    """
    lam = _check_lambda(lam)
    if penalty.k != model.k:
        raise InvalidInputError("penalty and model dimensions differ")
    return _fit(_objective(model, data), penalty, lam, start)


def fit_path(model, data, penalty, lambdas) -> np.ndarray:
    """Penalized fits over a grid, warm-started from the largest ``lam`` down."""
    lambdas = np.asarray(lambdas, dtype=float)
    out = np.empty((lambdas.size, model.k))
    start = None
    for idx in np.argsort(-lambdas, kind="stable"):
        out[idx] = fit_penalized(model, data, penalty, lambdas[idx], start=start)
        start = out[idx]
    return out


def to_beta(theta, n: int) -> np.ndarray:
    """Convert local coordinates to the original parameter scale."""
    return np.asarray(theta) / math.sqrt(n)


def to_theta(beta, n: int) -> np.ndarray:
    return np.asarray(beta) * math.sqrt(n)


def strong_convexity(model: LossModel, data: Dataset, theta=None) -> float:
    """Smallest eigenvalue of the sample Hessian of ``L_n`` (diagnostic only)."""
    obj = _objective(model, data)
    theta = fit_erm(model, data) if theta is None else theta
    return float(np.linalg.eigvalsh(obj.hess(theta)).min())


# ---------------------------------------------------------------------------
# Leave-one-out
# ---------------------------------------------------------------------------


def _fold_obj(model, data, i):
    W, Y = data.without(i)
    return _Objective(model, W, Y, math.sqrt(data.n))


def loo_exact(model: LossModel, data: Dataset, penalty: PenaltySpec, lam, theta_hat=None) -> np.ndarray:
    """Refit with each observation held out; row ``i`` is ``theta_hat^{lam,-i}``."""
    lam = _check_lambda(lam)
    n, k = data.n, data.k
    out = np.empty((n, k))
    if model.kind == LINEAR and (lam == 0 or penalty.is_ridge):
        # Batched normal equations for all folds at once.
        root_n = math.sqrt(n)
        H = data.W.T @ data.W / n
        c = data.W.T @ data.Y / root_n
        K = H if lam == 0 else H + lam * penalty.inverse_A()
        Ks = K[None] - np.einsum("ij,ik->ijk", data.W, data.W) / n
        cs = c[None] - data.W * (data.Y / root_n)[:, None]
        mins = np.linalg.eigvalsh(Ks).min(axis=1)
        bad = np.flatnonzero(mins <= STRONG_CONVEXITY_TOL)
        if bad.size:
            i = int(bad[0])
            raise RankDeficientError(
                float(mins[i]),
                f"fold {i}: leave-one-out Hessian smallest eigenvalue {mins[i]:.3e}",
                index=i,
            )
        return np.linalg.solve(Ks, cs[..., None])[..., 0]

    if theta_hat is None:
        theta_hat = fit_penalized(model, data, penalty, lam)
    for i in range(n):
        try:
            out[i] = _fit(_fold_obj(model, data, i), penalty, lam, start=theta_hat)
        except ConvergenceError as exc:
            raise ConvergenceError(f"fold {i}: {exc}", residual=exc.residual, index=i) from exc
        except RankDeficientError as exc:
            raise RankDeficientError(exc.eigenvalue, f"fold {i}: {exc}", index=i) from exc
    return out


def loo_approx(model: LossModel, data: Dataset, penalty: PenaltySpec, lam, theta_hat, return_flags=False):
    """One Newton step on each leave-one-out objective, started at ``theta_hat``.

    For Lasso the step is taken in ``h = A^{-1} theta`` over the active
    coordinates only, with the L1 term linearized at the current signs and
    inactive coordinates held at zero. Folds whose step Hessian is singular are
    refitted exactly and reported in the optional flags array.
    """
    lam = _check_lambda(lam)
    theta_hat = _finite("theta_hat", theta_hat).reshape(-1)
    n, k = data.n, data.k
    root_n = math.sqrt(n)
    obj = _objective(model, data)
    r, w = model.residual_weights(theta_hat / root_n, data.W, data.Y)
    H = obj.hess(theta_hat)
    # Per-observation gradient and Hessian of l(theta / root_n, Z_i) in theta.
    gi = -(data.W * r[:, None]) / root_n
    Hi = np.einsum("i,ij,ik->ijk", w, data.W, data.W) / n
    grad_full = gi.sum(axis=0)

    lasso = penalty is not None and lam > 0 and not penalty.is_ridge
    if lasso:
        A = penalty.A
        h = penalty.solve_A(theta_hat)
        J = np.flatnonzero(np.abs(h) > 1e-9)
        eta = np.sign(h[J])
        AJ = A[:, J]
        Hs = np.einsum("ja,ijk,kb->iab", AJ, H[None] - Hi, AJ)
        grads = (grad_full[None] - gi) @ AJ + lam * eta[None]
        basis = AJ
    else:
        P = np.zeros((k, k)) if penalty is None or lam == 0 else lam * penalty.inverse_A()
        Hs = H[None] - Hi + P[None]
        grads = grad_full[None] - gi + (P @ theta_hat)[None]
        basis = np.eye(k)

    flags = np.zeros(n, dtype=bool)
    out = np.empty((n, k))
    if basis.shape[1] == 0:
        out[:] = theta_hat
    else:
        mins = np.linalg.eigvalsh(Hs).min(axis=1)
        flags = mins <= STRONG_CONVEXITY_TOL
        ok = ~flags
        steps = np.zeros((n, basis.shape[1]))
        if ok.any():
            steps[ok] = np.linalg.solve(Hs[ok], grads[ok][..., None])[..., 0]
        out = theta_hat[None] - steps @ basis.T
    for i in np.flatnonzero(flags):
        log.warning("fold %d: singular step Hessian, substituting exact refit", i)
        out[i] = _fit(_fold_obj(model, data, i), penalty, lam, start=theta_hat)
    return (out, flags) if return_flags else out


# ---------------------------------------------------------------------------
# Influence functions
# ---------------------------------------------------------------------------


def influence_estimate(model: LossModel, data: Dataset, theta0, source: str = "known",
                       standardized: bool = False) -> InfluenceBundle:
    """Scores, linearized estimate and score covariance at ``theta0``.

    Parameters
    ----------
    theta0 : array_like
        Local parameter; the true value in simulations (``source="known"``) or a
        plug-in such as ``fit_erm`` output (``source="plugin"``).
    standardized : bool
        Premultiply scores by the inverse sample Hessian at ``theta0``. With
        the linear model this makes ``theta_tilde`` equal the least-squares fit.
    """
    if source not in ("known", "plugin"):
        raise InvalidInputError("source must be 'known' or 'plugin'")
    theta0 = _finite("theta0", theta0).reshape(-1)
    if theta0.size != model.k:
        raise InvalidInputError("theta0 has the wrong length")
    n = data.n
    root_n = math.sqrt(n)
    r, _ = model.residual_weights(theta0 / root_n, data.W, data.Y)
    X = data.W * r[:, None]
    if standardized:
        H = _objective(model, data).hess(theta0)
        X = np.linalg.solve(H, X.T).T
    theta_tilde = theta0 + X.sum(axis=0) / root_n
    sigma_hat = X.T @ X / n
    return InfluenceBundle(theta_tilde, X, 0.5 * (sigma_hat + sigma_hat.T), source, standardized)

"""Monte Carlo risk of tuned estimators, finite-sample and in the normal-means limit.

Losses are out-of-sample regrets scaled by ``n`` (local scale); in the limit
experiment the loss of ``theta`` is ``1/2 ||theta - theta0||^2``. Risks are
truncated at ``M`` so they exist at every ``n``.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import stats
from scipy.special import expit

from .cv import EXACT, cv_curve, tune_cv
from .erm import LINEAR, Dataset, LossModel
from .errors import ConvergenceError, InvalidInputError, RankDeficientError, StudyAbortedError
from .seeding import LIMIT_N, derive_seed, rng_for
from .shrinkage import PenaltySpec, _finite, prox
from .sure import ALL_NONNEG, minimize_sure

log = logging.getLogger(__name__)

DEFAULT_M = 50.0
MAX_FAILURE_RATE = 0.01
QUAD_TOL = 1e-8
PLAIN = "plain"
POSITIVE_PART = "positive-part"


@dataclass(frozen=True, eq=False)
class DgpSpec:
    """Local-to-zero data-generating process with ``beta0 = theta0 / sqrt(n)``.

    Features are i.i.d. normal with identity covariance for the linear model.
    For the logistic model they are scaled by 2 so the expected Hessian of the
    loss at ``beta = 0`` is the identity.
    """

    theta0: np.ndarray
    model: LossModel
    sigma_noise: float = 1.0

    def __post_init__(self):
        t = _finite("theta0", self.theta0).reshape(-1)
        if t.size != self.model.k:
            raise InvalidInputError("theta0 length does not match the model dimension")
        if not (np.isfinite(self.sigma_noise) and self.sigma_noise > 0):
            raise InvalidInputError("sigma_noise must be positive")
        object.__setattr__(self, "theta0", t)

    @property
    def k(self) -> int:
        return self.model.k

    @property
    def feature_scale(self) -> float:
        return 1.0 if self.model.kind == LINEAR else 2.0

    def limit_sigma(self) -> np.ndarray:
        """Covariance of the limiting normal experiment."""
        if self.model.kind == LINEAR:
            return self.sigma_noise**2 * np.eye(self.k)
        return np.eye(self.k)


@dataclass(frozen=True)
class McConfig:
    sample_sizes: tuple = ()
    replications: int = 1000
    master_seed: int = 20240601
    truncation_m: float = DEFAULT_M
    threads: int = 1

    def __post_init__(self):
        if int(self.replications) < 1:
            raise InvalidInputError("replications must be at least 1")
        if not self.truncation_m > 0:
            raise InvalidInputError("truncation M must be positive")
        if int(self.threads) < 0:
            raise InvalidInputError("threads must be >= 0")
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))


@dataclass(frozen=True, eq=False)
class RiskEstimate:
    mean: float
    stderr: float
    replications: int
    truncation_m: float
    failures: int = 0
    losses: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)


def _summarize(losses, m, failures=0) -> RiskEstimate:
    losses = np.asarray(losses, dtype=float)
    trunc = np.minimum(losses, m)
    r = trunc.size
    if r == 1:
        warnings.warn("a single replication has no standard error; reporting 0", stacklevel=3)
        se = 0.0
    else:
        se = float(trunc.std(ddof=1) / math.sqrt(r))
    return RiskEstimate(float(trunc.mean()), se, r, float(m), failures, losses)


def _map(fn, items, threads: int):
    """Ordered map; results never depend on the number of workers."""
    if threads == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=None if threads == 0 else threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# Data and regret
# ---------------------------------------------------------------------------


def simulate_dataset(dgp: DgpSpec, n: int, master_seed: int, rep: int) -> Dataset:
    """Draw ``n`` observations for replication ``rep``; bit-identical for equal inputs."""
    n = int(n)
    if n <= dgp.k:
        raise InvalidInputError(f"need n > k, got n={n}, k={dgp.k}")
    rng = rng_for(master_seed, n, rep)
    W = dgp.feature_scale * rng.standard_normal((n, dgp.k))
    u = W @ (dgp.theta0 / math.sqrt(n))
    if dgp.model.kind == LINEAR:
        Y = u + dgp.sigma_noise * rng.standard_normal(n)
    else:
        Y = (rng.random(n) < expit(u)).astype(float)
    return Dataset(W, Y)


def _bregman_softplus(u, v):
    # softplus(u) - softplus(v) - sigmoid(v) (u - v) >= 0
    return np.logaddexp(0.0, u) - np.logaddexp(0.0, v) - expit(v) * (u - v)


def logistic_regret(beta, beta0, feature_scale=2.0, tol=QUAD_TOL, max_degree=640) -> float:
    """``E[l(beta, Z) - l(beta0, Z)]`` for the logistic model by Gauss-Hermite quadrature.

    Only the pair ``(W beta, W beta0)`` matters, a bivariate normal; the degree
    doubles until successive values differ by less than ``tol``.
    """
    C = feature_scale**2 * np.array([[beta @ beta, beta @ beta0], [beta @ beta0, beta0 @ beta0]])
    w, Q = np.linalg.eigh(C)
    F = Q * np.sqrt(np.clip(w, 0.0, None))
    prev = None
    val = math.nan
    deg = 20
    while deg <= max_degree:
        x, wt = hermegauss(deg)
        wt = wt / math.sqrt(2 * math.pi)
        z1, z2 = np.meshgrid(x, x, indexing="ij")
        uv = F @ np.vstack([z1.ravel(), z2.ravel()])
        val = float(np.outer(wt, wt).ravel() @ _bregman_softplus(uv[0], uv[1]))
        if prev is not None and abs(val - prev) < tol:
            return val
        prev = val
        deg *= 2
    residual = math.inf if prev is None or math.isnan(val) else abs(val - prev)
    raise ConvergenceError("Gauss-Hermite quadrature did not settle", residual=residual)


def oos_regret(model: LossModel, dgp: DgpSpec, n: int, theta) -> float:
    """Out-of-sample regret of ``theta`` scaled by ``n``.

    Examples
    --------
    >>> dgp = DgpSpec(np.zeros(2), LossModel.linear(2))
    >>> oos_regret(dgp.model, dgp, 100, [1.0, 0.0])
    0.5
    """
    theta = _finite("theta", theta).reshape(-1)
    if model.kind == LINEAR:
        d = theta - dgp.theta0
        return 0.5 * float(d @ d)
    root_n = math.sqrt(n)
    return n * logistic_regret(theta / root_n, dgp.theta0 / root_n, dgp.feature_scale)


# ---------------------------------------------------------------------------
# Tuned risks
# ---------------------------------------------------------------------------


def cv_tuned_loss(dgp, n, penalty, lambda_grid, mode, master_seed, rep) -> float:
    data = simulate_dataset(dgp, n, master_seed, rep)
    curve = cv_curve(dgp.model, data, penalty, lambda_grid, mode)
    _, theta = tune_cv(dgp.model, data, penalty, lambda_grid, mode, curve=curve)
    return oos_regret(dgp.model, dgp, n, theta)


def risk_cv(dgp: DgpSpec, n: int, penalty: PenaltySpec, lambda_grid, mode=EXACT,
            mc: McConfig = McConfig()) -> RiskEstimate:
    """Truncated risk of the CV-tuned estimator at sample size ``n``.

    Replications whose fit fails are excluded and counted; more than 1%
    failures aborts the study.
    """
    def one(rep):
        try:
            return cv_tuned_loss(dgp, n, penalty, lambda_grid, mode, mc.master_seed, rep)
        except (RankDeficientError, ConvergenceError) as exc:
            log.warning("replication %d at n=%d failed: %s", rep, n, exc)
            return math.nan

    losses = np.array(_map(one, range(mc.replications), mc.threads))
    bad = int(np.isnan(losses).sum())
    if bad > MAX_FAILURE_RATE * mc.replications:
        raise StudyAbortedError(
            f"{bad} of {mc.replications} replications failed at n={n}", bad, mc.replications
        )
    return _summarize(losses[~np.isnan(losses)], mc.truncation_m, bad)


def _normal_factor(sigma) -> np.ndarray:
    w, Q = np.linalg.eigh(0.5 * (sigma + sigma.T))
    if w.min() < -1e-10 * max(1.0, abs(w).max()):
        raise InvalidInputError("sigma must be positive semi-definite")
    return Q * np.sqrt(np.clip(w, 0.0, None))


def limit_loss(theta0, sigma_factor, penalty, lambda_set, master_seed, rep) -> float:
    """``1/2 ||theta* - theta0||^2`` for one normal-means draw tuned by SURE."""
    rng = rng_for(master_seed, LIMIT_N, rep)
    theta_hat = theta0 + sigma_factor @ rng.standard_normal(theta0.size)
    sigma = sigma_factor @ sigma_factor.T
    lam = minimize_sure(penalty, theta_hat, sigma, lambda_set).lambda_star
    d = prox(penalty, lam, theta_hat).fitted - theta0
    return 0.5 * float(d @ d)


def risk_sure_limit(theta0, sigma, penalty: PenaltySpec, lambda_set=ALL_NONNEG,
                    mc: McConfig = McConfig()) -> RiskEstimate:
    """Truncated risk of the SURE-tuned estimator in the limit normal-means experiment."""
    theta0 = _finite("theta0", theta0).reshape(-1)
    sigma = np.atleast_2d(_finite("sigma", sigma))
    F = _normal_factor(sigma)
    losses = _map(
        lambda rep: limit_loss(theta0, F, penalty, lambda_set, mc.master_seed, rep),
        range(mc.replications),
        mc.threads,
    )
    return _summarize(losses, mc.truncation_m)


# ---------------------------------------------------------------------------
# James-Stein
# ---------------------------------------------------------------------------


def js_risk_series(norm_theta: float, k: int, tail_tol: float = 1e-12) -> float:
    """Exact normalized risk of plain James-Stein from the Poisson mixture.

    ``MSE = k - (k-2)^2 E[1 / (k - 2 + 2K)]`` with ``K ~ Poisson(||theta||^2 / 2)``.
    """
    if k < 3:
        raise InvalidInputError("James-Stein requires k >= 3")
    mu = 0.5 * float(norm_theta) ** 2
    if mu == 0:
        return 2.0 / k
    # Sum outward from the mode until both tails are negligible.
    mode = int(mu)
    pmf = stats.poisson(mu)
    total = 0.0
    j = mode
    while True:
        term = pmf.pmf(j) / (k - 2 + 2 * j)
        total += term
        if term < tail_tol and j > mode:
            break
        j += 1
    j = mode - 1
    while j >= 0:
        term = pmf.pmf(j) / (k - 2 + 2 * j)
        total += term
        if term < tail_tol:
            break
        j -= 1
    return (k - (k - 2) ** 2 * total) / k


def js_losses(norm_theta: float, k: int, variant: str, reps: int, seed: int) -> np.ndarray:
    """Per-draw squared errors of James-Stein, divided by ``k``.

    By rotation invariance only ``Z1`` (the noise along ``theta``) and the
    chi-square of the orthogonal part enter.
    """
    variant = str(variant).lower()
    if variant not in (PLAIN, POSITIVE_PART):
        raise InvalidInputError(f"unknown James-Stein variant {variant!r}")
    if k < 3:
        raise InvalidInputError("James-Stein requires k >= 3")
    if norm_theta < 0:
        raise InvalidInputError("normTheta must be non-negative")
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, k, int(round(norm_theta * 1e6)))))
    t = float(norm_theta)
    z1 = rng.standard_normal(reps)
    rest = rng.chisquare(k - 1, reps)
    along = t + z1
    r2 = along**2 + rest
    s = 1.0 - (k - 2) / r2
    if variant == POSITIVE_PART:
        s = np.maximum(s, 0.0)
    return (s * s * r2 - 2.0 * s * t * along + t * t) / k


def js_risk(norm_theta: float, k: int = 10, variant: str = PLAIN, reps: int = 100_000,
            seed: int = 0, return_stderr: bool = False):
    """Monte Carlo normalized MSE of James-Stein at ``||theta|| = norm_theta``."""
    x = js_losses(norm_theta, k, variant, reps, seed)
    mean = float(x.mean())
    if return_stderr:
        return mean, float(x.std(ddof=1) / math.sqrt(reps))
    return mean


# ---------------------------------------------------------------------------
# Distributional comparison
# ---------------------------------------------------------------------------


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    return float(stats.ks_2samp(np.asarray(a), np.asarray(b)).statistic)


def loss_distribution_compare(dgp: DgpSpec, n: int, penalty: PenaltySpec, lambda_grid, mode=EXACT,
                              mc: McConfig = McConfig(), limit_lambda_set=None) -> float:
    """KS distance between finite-``n`` CV-tuned losses and SURE-tuned limit losses.

    The limit experiment uses the same grid unless ``limit_lambda_set`` is given.
    """
    finite = risk_cv(dgp, n, penalty, lambda_grid, mode, mc)
    lam_set = lambda_grid if limit_lambda_set is None else limit_lambda_set
    limit = risk_sure_limit(dgp.theta0, dgp.limit_sigma(), penalty, lam_set, mc)
    return ks_distance(finite.losses, limit.losses)

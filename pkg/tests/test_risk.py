import math

import numpy as np
import pytest
from scipy import integrate, stats

from surecvlab import risk
from surecvlab.erm import LossModel, fit_erm
from surecvlab.errors import ConvergenceError, InvalidInputError, StudyAbortedError
from surecvlab.risk import (
    PLAIN,
    POSITIVE_PART,
    DgpSpec,
    McConfig,
    js_losses,
    js_risk,
    js_risk_series,
    ks_distance,
    logistic_regret,
    oos_regret,
    risk_cv,
    risk_sure_limit,
    simulate_dataset,
)
from surecvlab.shrinkage import PenaltySpec, prox

from oracles import js_plain_series

SEED = 20240601


# --- data ----------------------------------------------------------------------------


def test_dgp_validation():
    with pytest.raises(InvalidInputError):
        DgpSpec(np.zeros(2), LossModel.linear(3))
    with pytest.raises(InvalidInputError):
        DgpSpec(np.zeros(2), LossModel.linear(2), sigma_noise=0.0)
    with pytest.raises(InvalidInputError):
        simulate_dataset(DgpSpec(np.zeros(2), LossModel.linear(2)), 2, SEED, 0)
    with pytest.raises(InvalidInputError):
        McConfig(replications=0)


def test_simulation_is_deterministic():
    dgp = DgpSpec(np.array([1.0, -1.0]), LossModel.logistic(2))
    a = simulate_dataset(dgp, 100, SEED, 3)
    b = simulate_dataset(dgp, 100, SEED, 3)
    c = simulate_dataset(dgp, 100, SEED, 4)
    assert np.array_equal(a.W, b.W) and np.array_equal(a.Y, b.Y)
    assert not np.array_equal(a.W, c.W)
    assert set(np.unique(a.Y)) <= {0.0, 1.0}


def test_pure_noise_has_no_correlation():
    dgp = DgpSpec(np.zeros(3), LossModel.linear(3))
    n = 2000
    data = simulate_dataset(dgp, n, SEED, 0)
    corr = [np.corrcoef(data.W[:, j], data.Y)[0, 1] for j in range(3)]
    assert np.max(np.abs(corr)) < 4 / math.sqrt(n)


def test_erm_error_has_chi_scale():
    dgp = DgpSpec(np.array([2.0, 0.0, 0.0]), LossModel.linear(3))
    d = [np.linalg.norm(fit_erm(dgp.model, simulate_dataset(dgp, 400, SEED, r)) - dgp.theta0) for r in range(200)]
    # ||theta_hat - theta0|| is close to chi with 3 degrees of freedom.
    assert abs(np.median(d) - math.sqrt(stats.chi2.median(3))) < 0.15


# --- regret -----------------------------------------------------------------------------


def test_linear_regret_closed_form():
    dgp = DgpSpec(np.array([0.3, -0.2]), LossModel.linear(2))
    assert oos_regret(dgp.model, dgp, 100, dgp.theta0) == 0.0
    dgp0 = DgpSpec(np.zeros(2), LossModel.linear(2))
    assert oos_regret(dgp0.model, dgp0, 100, [1.0, 0.0]) == 0.5


def test_logistic_regret_zero_at_truth():
    dgp = DgpSpec(np.array([1.0, 2.0]), LossModel.logistic(2))
    assert oos_regret(dgp.model, dgp, 50, dgp.theta0) == pytest.approx(0.0, abs=1e-14)


@pytest.mark.slow
def test_logistic_regret_matches_monte_carlo():
    n = 100
    dgp = DgpSpec(np.array([1.0, -0.5]), LossModel.logistic(2))
    theta = dgp.theta0 + np.array([0.3, 0.2])
    q = oos_regret(dgp.model, dgp, n, theta)
    b, b0 = theta / math.sqrt(n), dgp.theta0 / math.sqrt(n)
    rng = np.random.default_rng(99)
    vals = []
    for _ in range(10):
        W = 2.0 * rng.standard_normal((1_000_000, 2))
        u, u0 = W @ b, W @ b0
        p0 = 1.0 / (1.0 + np.exp(-u0))
        # Expected excess logistic loss given W.
        vals.append(n * (np.logaddexp(0, u) - np.logaddexp(0, u0) - p0 * (u - u0)))
    vals = np.concatenate(vals)
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(q - vals.mean()) <= 3 * se
    # And close to the quadratic approximation with unit Hessian.
    assert q == pytest.approx(0.5 * 0.13, rel=0.05)


def test_logistic_regret_quadrature_settles():
    val = logistic_regret(np.array([0.2, -0.1]), np.array([0.1, 0.0]))
    assert val > 0
    with pytest.raises(ConvergenceError):
        logistic_regret(np.array([30.0, -30.0]), np.array([0.0, 0.0]), max_degree=20)


# --- tuned risk ---------------------------------------------------------------------------


@pytest.mark.slow
def test_cv_shrinkage_beats_unpenalized_at_origin():
    k = 10
    dgp = DgpSpec(np.zeros(k), LossModel.linear(k))
    pen = PenaltySpec.ridge(np.eye(k))
    grid = np.concatenate([[0.0], np.geomspace(0.01, 1000, 25)])
    est = risk_cv(dgp, 400, pen, grid, mc=McConfig(replications=2000, master_seed=SEED))
    # Unpenalized risk is k / 2 under the halved squared-error loss.
    assert est.mean < k / 2 - 3 * est.stderr


def test_tiny_truncation_dominates():
    dgp = DgpSpec(np.ones(2), LossModel.linear(2))
    est = risk_cv(dgp, 50, PenaltySpec.ridge(np.eye(2)), [0.1, 1.0], mc=McConfig(replications=20, truncation_m=1e-6))
    assert est.mean == pytest.approx(1e-6, rel=1e-6)


def test_single_replication_warns():
    dgp = DgpSpec(np.ones(2), LossModel.linear(2))
    with pytest.warns(UserWarning):
        est = risk_cv(dgp, 50, PenaltySpec.ridge(np.eye(2)), [1.0], mc=McConfig(replications=1))
    assert est.stderr == 0.0 and est.replications == 1


def test_failures_are_counted_then_abort(monkeypatch):
    from surecvlab.errors import RankDeficientError

    real = risk.cv_tuned_loss

    def flaky(dgp, n, penalty, grid, mode, seed, rep):
        if rep in fail:
            raise RankDeficientError(0.0, "synthetic failure")
        return real(dgp, n, penalty, grid, mode, seed, rep)

    monkeypatch.setattr(risk, "cv_tuned_loss", flaky)
    dgp = DgpSpec(np.ones(2), LossModel.linear(2))
    pen = PenaltySpec.ridge(np.eye(2))
    fail = {7}
    est = risk_cv(dgp, 30, pen, [1.0], mc=McConfig(replications=200))
    assert est.failures == 1 and est.replications == 199
    fail = {3, 9, 11}
    with pytest.raises(StudyAbortedError) as info:
        risk_cv(dgp, 30, pen, [1.0], mc=McConfig(replications=200))
    assert info.value.failures == 3


def test_thread_count_does_not_change_results():
    dgp = DgpSpec(np.array([1.0, 0.5, 0.0]), LossModel.linear(3))
    pen = PenaltySpec.ridge(np.eye(3))
    grid = np.geomspace(0.05, 20, 10)
    a = risk_cv(dgp, 100, pen, grid, mc=McConfig(replications=40, threads=1))
    b = risk_cv(dgp, 100, pen, grid, mc=McConfig(replications=40, threads=4))
    assert np.array_equal(a.losses, b.losses) and a.mean == b.mean
    c = risk_sure_limit(dgp.theta0, np.eye(3), pen, mc=McConfig(replications=40, threads=1))
    d = risk_sure_limit(dgp.theta0, np.eye(3), pen, mc=McConfig(replications=40, threads=0))
    assert np.array_equal(c.losses, d.losses)


# --- limit experiment --------------------------------------------------------------------------


def test_limit_with_only_zero_penalty_is_half_k():
    k = 3
    est = risk_sure_limit(np.ones(k), np.eye(k), PenaltySpec.ridge(np.eye(k)), [0.0],
                          mc=McConfig(replications=20000, truncation_m=1e6))
    assert abs(est.mean - k / 2) <= 3 * est.stderr


def test_limit_degenerate_sigma_is_deterministic():
    theta0 = np.array([1.0, 0.2])
    pen = PenaltySpec.lasso(np.eye(2))
    est = risk_sure_limit(theta0, np.zeros((2, 2)), pen, mc=McConfig(replications=5))
    assert np.all(est.losses == est.losses[0])
    # With Sigma = 0, SURE is ||g||^2, minimized at lam = 0.
    assert est.losses[0] == pytest.approx(0.5 * np.sum(prox(pen, 0.0, theta0).g ** 2))


def _sure_ridge_origin_exact(k):
    """Normalized risk of SURE-tuned Ridge (A = I, Sigma = I) at the origin.

    The tuned shrinkage is ``max(0, 1 - k / R^2)`` with ``R^2 ~ chi2(k)``.
    """
    val, _ = integrate.quad(lambda x: (x - k) ** 2 / x * stats.chi2.pdf(x, k), k, np.inf)
    return val / k


@pytest.mark.slow
def test_limit_ridge_at_origin_matches_exact_integral():
    k = 10
    est = risk_sure_limit(np.zeros(k), np.eye(k), PenaltySpec.ridge(np.eye(k)),
                          mc=McConfig(replications=20000, truncation_m=100))
    assert abs(2 * est.mean / k - _sure_ridge_origin_exact(k)) <= 3 * 2 * est.stderr / k


@pytest.mark.slow
def test_limit_ridge_at_origin_band():
    k = 10
    est = risk_sure_limit(np.zeros(k), np.eye(k), PenaltySpec.ridge(np.eye(k)),
                          mc=McConfig(replications=100_000, truncation_m=100))
    assert 0.17 <= 2 * est.mean / k <= 0.23


# --- James-Stein ---------------------------------------------------------------------------------


def test_js_series_at_origin():
    assert js_risk_series(0.0, 10) == 0.2


@pytest.mark.parametrize("norm", [0.5, 1.0, 2.0, 4.0, 6.0, 15.0])
def test_js_series_matches_direct_sum(norm):
    # Terms are dropped once below 1e-12, so the tail costs at most ~1e-11.
    assert js_risk_series(norm, 10) == pytest.approx(js_plain_series(norm, 10), abs=1e-10)


@pytest.mark.parametrize("norm", [0.0, 1.0, 2.0, 4.0, 6.0])
def test_js_plain_monte_carlo_matches_series(norm):
    mean, se = js_risk(norm, 10, PLAIN, reps=200_000, seed=SEED, return_stderr=True)
    assert abs(mean - js_risk_series(norm, 10)) <= 3 * se


def test_js_losses_match_full_vector_simulation():
    k, norm = 5, 1.5
    theta = np.zeros(k)
    theta[0] = norm
    rng = np.random.default_rng(1)
    x = theta + rng.standard_normal((200_000, k))
    r2 = np.sum(x * x, axis=1)
    est = np.maximum(1 - (k - 2) / r2, 0)[:, None] * x
    full = np.sum((est - theta) ** 2, axis=1) / k
    fast = js_losses(norm, k, POSITIVE_PART, 200_000, SEED)
    se = math.hypot(full.std() / math.sqrt(full.size), fast.std() / math.sqrt(fast.size))
    assert abs(full.mean() - fast.mean()) <= 3 * se


def test_js_curve_monotone():
    norms = np.linspace(0, 6, 13)
    prev = None
    for v in (PLAIN, POSITIVE_PART):
        prev = None
        for t in norms:
            m, se = js_risk(t, 10, v, reps=100_000, seed=SEED, return_stderr=True)
            if prev is not None:
                assert m >= prev[0] - 2 * math.hypot(se, prev[1])
            prev = (m, se)


def test_js_positive_part_dominates_plain():
    for t in (0.0, 1.0, 3.0):
        assert js_risk(t, 10, POSITIVE_PART, 50_000, SEED) <= js_risk(t, 10, PLAIN, 50_000, SEED)


def test_js_validation():
    with pytest.raises(InvalidInputError):
        js_risk(1.0, 2)
    with pytest.raises(InvalidInputError):
        js_risk(1.0, 10, "shrunk")
    with pytest.raises(InvalidInputError):
        js_risk_series(1.0, 2)


# --- distributional comparison ----------------------------------------------------------------------


def test_ks_identical_samples():
    x = np.random.default_rng(0).normal(size=500)
    assert ks_distance(x, x) == 0.0
    assert ks_distance(x, x + 100) == 1.0

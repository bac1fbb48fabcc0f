import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surecvlab.errors import ConvergenceError, InvalidInputError, NonFiniteInputError
from surecvlab.shrinkage import PenaltySpec, grad_g, lasso_kkt_residual, prox, solve_lasso_quadratic

from oracles import (
    finite_difference_jacobian,
    lasso_enumerate,
    lasso_projected_gradient,
    ridge_prox_grid,
)


def random_invertible(rng, k, cond_max=50.0):
    while True:
        A = rng.normal(size=(k, k))
        if np.linalg.cond(A) < cond_max:
            return A


def random_spd(rng, k):
    B = rng.normal(size=(k, k))
    return B @ B.T + 0.2 * np.eye(k)


# --- penalty validation ------------------------------------------------------


def test_ridge_rejects_asymmetric_and_indefinite():
    with pytest.raises(InvalidInputError):
        PenaltySpec.ridge([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(InvalidInputError):
        PenaltySpec.ridge(np.diag([1.0, -1.0]))
    with pytest.raises(InvalidInputError):
        PenaltySpec.ridge(np.diag([1.0, 1e-12]))


def test_lasso_rejects_ill_conditioned():
    with pytest.raises(InvalidInputError):
        PenaltySpec.lasso(np.diag([1.0, 1e-13]))


def test_unknown_kind_and_nonfinite():
    with pytest.raises(InvalidInputError):
        PenaltySpec("scad", np.eye(2))
    with pytest.raises(NonFiniteInputError):
        PenaltySpec.ridge([[np.nan]])
    with pytest.raises(NonFiniteInputError):
        prox(PenaltySpec.ridge(np.eye(2)), 1.0, [1.0, np.inf])


def test_negative_lambda_and_length_mismatch():
    pen = PenaltySpec.lasso(np.eye(2))
    with pytest.raises(InvalidInputError):
        prox(pen, -1.0, [1.0, 2.0])
    with pytest.raises(InvalidInputError):
        prox(pen, 1.0, [1.0, 2.0, 3.0])


def test_penalty_values():
    A = np.diag([2.0, 4.0])
    assert PenaltySpec.ridge(A).value([2.0, 4.0]) == pytest.approx(0.5 * (2 + 4))
    assert PenaltySpec.lasso(A).value([2.0, -4.0]) == pytest.approx(2.0)


# --- prox examples -----------------------------------------------------------


def test_ridge_scalar_closed_form():
    r = prox(PenaltySpec.ridge(np.eye(1)), 1.0, [2.0])
    assert r.g == pytest.approx([-1.0], abs=1e-15)
    assert r.fitted == pytest.approx([1.0], abs=1e-15)
    assert not r.eta.any() and list(r.active_set) == [0]


def test_lasso_soft_threshold():
    r = prox(PenaltySpec.lasso(np.eye(3)), 1.0, [3.0, 0.5, -2.0])
    np.testing.assert_allclose(r.h, [2.0, 0.0, -1.0], atol=1e-12)
    np.testing.assert_array_equal(r.eta, [1, 0, -1])
    np.testing.assert_array_equal(r.active_set, [0, 2])


@pytest.mark.parametrize("kind", ["ridge", "lasso"])
def test_lambda_zero_is_identity(kind):
    rng = np.random.default_rng(3)
    A = random_spd(rng, 3) if kind == "ridge" else random_invertible(rng, 3)
    theta = rng.normal(size=3)
    r = prox(PenaltySpec(kind, A), 0.0, theta)
    assert np.all(r.g == 0.0)
    np.testing.assert_array_equal(r.fitted, theta)
    np.testing.assert_array_equal(r.grad_g, np.zeros((3, 3)))


def test_lasso_matches_projected_gradient_oracle():
    rng = np.random.default_rng(11)
    A = random_invertible(rng, 3)
    theta = rng.normal(size=3) * 2
    r = prox(PenaltySpec.lasso(A), 0.7, theta)
    h_oracle = lasso_projected_gradient(A, theta, 0.7, starts=100)
    np.testing.assert_allclose(r.h, h_oracle, atol=1e-6)


def test_lasso_matches_enumeration_oracle_many():
    rng = np.random.default_rng(12)
    for _ in range(50):
        A = random_invertible(rng, 3)
        theta = rng.normal(size=3) * 2
        lam = rng.uniform(0.05, 2.0)
        r = prox(PenaltySpec.lasso(A), lam, theta)
        np.testing.assert_allclose(r.h, lasso_enumerate(A, theta, lam), atol=1e-9)


def test_ridge_matches_dense_grid_minimization():
    rng = np.random.default_rng(5)
    for _ in range(5):
        A = random_spd(rng, 2)
        theta = rng.normal(size=2) * 2
        lam = rng.uniform(0.1, 5)
        g = prox(PenaltySpec.ridge(A), lam, theta).g
        np.testing.assert_allclose(g, ridge_prox_grid(A, theta, lam), atol=1e-4)


# --- gradient ------------------------------------------------------------------


def test_ridge_gradient_diag():
    pen = PenaltySpec.ridge(np.diag([1.0, 40.0]))
    r = prox(pen, 1.0, [0.3, -0.2])
    np.testing.assert_allclose(r.grad_g, np.diag([-0.5, -1 / 41]), atol=1e-15)


def test_lasso_gradient_orthogonal():
    r = prox(PenaltySpec.lasso(np.eye(3)), 1.0, [3.0, 0.5, -2.0])
    np.testing.assert_allclose(r.grad_g, np.diag([0.0, -1.0, 0.0]), atol=1e-14)


@pytest.mark.parametrize("kind", ["ridge", "lasso"])
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(21 if kind == "lasso" else 22)
    checked = 0
    while checked < 20:
        A = random_spd(rng, 3) if kind == "ridge" else random_invertible(rng, 3)
        pen = PenaltySpec(kind, A)
        theta = rng.normal(size=3) * 2
        r = prox(pen, 0.6, theta)
        if r.boundary_flag:
            continue
        fd = finite_difference_jacobian(lambda t: prox(pen, 0.6, t).g, theta)
        assert np.abs(fd - r.grad_g).max() <= 1e-4
        assert np.abs(grad_g(pen, 0.6, theta, r) - r.grad_g).max() == 0
        checked += 1


# --- properties ----------------------------------------------------------------


def _pen_strategy():
    return st.tuples(st.sampled_from(["ridge", "lasso"]), st.integers(0, 10_000))


@settings(max_examples=60, deadline=None)
@given(_pen_strategy(), st.floats(0.0, 5.0))
def test_lipschitz_one_and_gradient_norm(spec, lam):
    kind, seed = spec
    rng = np.random.default_rng(seed)
    A = random_spd(rng, 3) if kind == "ridge" else random_invertible(rng, 3)
    pen = PenaltySpec(kind, A)
    t1, t2 = rng.normal(size=(2, 3)) * 3
    r1, r2 = prox(pen, lam, t1), prox(pen, lam, t2)
    assert np.linalg.norm(r1.g - r2.g) <= np.linalg.norm(t1 - t2) * (1 + 1e-9)
    assert np.linalg.norm(r1.grad_g, 2) <= 1 + 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 4.0))
def test_lasso_kkt(seed, lam):
    rng = np.random.default_rng(seed)
    A = random_invertible(rng, 3)
    theta = rng.normal(size=3) * 2
    r = prox(PenaltySpec.lasso(A), lam, theta)
    c = A.T @ (A @ r.h - theta)
    act = r.eta != 0
    assert np.all(np.abs(c[act] + lam * r.eta[act]) <= 1e-8)
    assert np.all(np.abs(c[~act]) <= lam + 1e-8)


@pytest.mark.parametrize("kind", ["ridge", "lasso"])
def test_monotone_shrinkage_identity_A(kind):
    rng = np.random.default_rng(8)
    pen = PenaltySpec(kind, np.eye(4))
    lams = np.linspace(0, 6, 40)
    for _ in range(20):
        theta = rng.normal(size=4) * 2
        norms = [np.linalg.norm(prox(pen, lam, theta).fitted) for lam in lams]
        assert np.all(np.diff(norms) <= 1e-9)


def test_local_linearity_of_sign_pattern():
    rng = np.random.default_rng(31)
    pen = PenaltySpec.lasso(random_invertible(rng, 3))
    same = 0
    for _ in range(500):
        theta = rng.normal(size=3)
        d = rng.normal(size=3)
        d *= 1e-5 / np.linalg.norm(d)
        same += np.array_equal(prox(pen, 0.5, theta).eta, prox(pen, 0.5, theta + d).eta)
    assert same / 500 > 0.99


def test_boundary_flag_at_kink():
    pen = PenaltySpec.lasso(np.eye(2))
    assert prox(pen, 1.0, [1.0, 3.0]).boundary_flag
    assert not prox(pen, 1.0, [1.5, 3.0]).boundary_flag


def test_warm_start_gives_same_solution():
    rng = np.random.default_rng(2)
    A = random_invertible(rng, 4)
    pen = PenaltySpec.lasso(A)
    theta = rng.normal(size=4) * 2
    cold = prox(pen, 0.4, theta)
    warm = prox(pen, 0.4, theta, h0=prox(pen, 0.5, theta).h)
    np.testing.assert_allclose(cold.h, warm.h, atol=1e-12)


def test_solver_reports_nonconvergence():
    G = np.array([[1.0, 0.999999], [0.999999, 1.0]])
    b = np.array([1.0, -1.0])
    with pytest.raises(ConvergenceError) as info:
        solve_lasso_quadratic(G, b, 1e-3, max_sweeps=0)
    assert info.value.residual > 0


def test_kkt_residual_zero_at_solution():
    G = np.eye(2)
    b = np.array([3.0, 0.2])
    h, res = solve_lasso_quadratic(G, b, 1.0)
    assert res == 0.0 and lasso_kkt_residual(G, b, 1.0, h) == 0.0

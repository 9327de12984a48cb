import numpy as np
import pytest
import scipy.sparse as sp

from oracles import dense_max_eig, kink_aligned_argmin, prox_grid, random_disjoint_rows
from qevolve.core import Dissipation, build_subproblem
from qevolve.exceptions import ConvergenceError, ModelError
from qevolve.fracture import FractureParams, build_problem, cohesive_remainder
from qevolve.solver import (
    CompositeObjective,
    estimate_lipschitz,
    grad_check,
    soft_threshold,
    solve_composite,
    strong_convexity_probe,
)


# ---------------------------------------------------------------- soft threshold

@pytest.mark.parametrize("x, lam, expected", [(0.0, 0.7, 0.0), (2.0, 0.5, 1.5), (-0.3, 0.5, 0.0)])
def test_soft_threshold_examples(x, lam, expected):
    assert soft_threshold(x, lam) == pytest.approx(expected, abs=1e-12)


def test_soft_threshold_matches_grid_prox():
    rng = np.random.default_rng(1)
    for _ in range(50):
        x, lam = rng.uniform(-3.5, 3.5), rng.uniform(0.0, 2.0)
        assert abs(soft_threshold(x, lam) - prox_grid(x, lam)) < 1e-5


def test_soft_threshold_vectorized_and_rejects_negative():
    out = soft_threshold(np.array([-2.0, 0.1, 3.0]), np.array([1.0, 1.0, 0.5]))
    np.testing.assert_allclose(out, [-1.0, 0.0, 2.5])
    with pytest.raises(ValueError):
        soft_threshold(1.0, -0.1)


# ---------------------------------------------------------------- composite solver

def test_scalar_example():
    obj = CompositeObjective(n=1, pinned=[], pinned_values=[], hessian=np.eye(1),
                             linear=np.array([3.0]), rows=np.eye(1), weights=np.ones(1))
    rep = solve_composite(obj, tol=1e-12)
    assert rep.minimizer[0] == pytest.approx(2.0, abs=1e-10)


def test_all_pinned_returns_values_without_iterating():
    obj = CompositeObjective(n=2, pinned=[0, 1], pinned_values=[1.5, -2.0], hessian=np.eye(2))
    rep = solve_composite(obj)
    assert rep.iterations == 0
    np.testing.assert_array_equal(rep.minimizer, [1.5, -2.0])


def test_pure_quadratic():
    obj = CompositeObjective(n=2, pinned=[], pinned_values=[], hessian=np.eye(2),
                             linear=np.array([1.0, 2.0]))
    rep = solve_composite(obj, tol=1e-12)
    np.testing.assert_allclose(rep.minimizer, [1.0, 2.0], atol=1e-11)


def _random_instance(rng, with_smooth, with_rho):
    n = int(rng.integers(1, 4))
    pinned = np.array([], dtype=int)
    if n >= 2 and rng.random() < 0.5:
        pinned = np.array([int(rng.integers(n))])
    free = np.setdiff1d(np.arange(n), pinned)
    Q = rng.standard_normal((n, n))
    H = Q @ Q.T + 4.0 * np.eye(n)
    c = rng.uniform(-3, 3, n)
    A = random_disjoint_rows(rng, free, n)
    extra = rng.choice(pinned, size=1) if len(pinned) and rng.random() < 0.5 else []
    for p in extra:
        # a row on a pinned DOF only contributes a constant
        row = np.zeros(n)
        row[p] = 1.0
        A = np.vstack([A, row])
    m = A.shape[0]
    b = rng.uniform(-1, 1, m)
    w = rng.uniform(0.1, 2.0, m)
    pv = rng.uniform(-1, 1, len(pinned))
    R = 10.0
    smooth = None
    if with_smooth:
        def smooth(v):
            return 0.3 * float(np.sum(np.log(np.cosh(v)))), 0.3 * np.tanh(v)
    row_smooth = None
    if with_rho:
        def row_smooth(s):
            val, der = cohesive_remainder(s, R)
            return w * val, w * der
    obj = CompositeObjective(n=n, pinned=pinned, pinned_values=pv, hessian=H, linear=c,
                             smooth=smooth, rows=sp.csr_matrix(A), offsets=b, weights=w,
                             row_smooth=row_smooth, row_curvature=w / R)

    def value(X):
        X = np.atleast_2d(X)
        V = np.empty((len(X), n))
        V[:, free] = X
        V[:, pinned] = pv
        r = V @ A.T + b
        out = 0.5 * np.einsum("pi,ij,pj->p", V, H, V) - V @ c + np.abs(r) @ w
        if with_smooth:
            out += 0.3 * np.sum(np.log(np.cosh(V)), axis=1)
        if with_rho:
            out += cohesive_remainder(r, R)[0] @ w
        return out

    return obj, value, free


def test_solve_composite_matches_grid_oracle():
    rng = np.random.default_rng(7)
    checked = 0
    for k in range(60):
        obj, value, free = _random_instance(rng, with_smooth=k % 2 == 1, with_rho=k % 3 == 0)
        rep = solve_composite(obj, tol=1e-12)
        A = obj.rows.toarray()
        act = np.any(A[:, free] != 0, axis=1)
        kinks = -(obj.offsets + A[:, obj.pinned] @ obj.pinned_values)[act]
        ref = kink_aligned_argmin(value, A[act][:, free], kinks, 8.0)
        assert np.all(np.abs(ref) < 3.5), "oracle box too small"
        assert np.max(np.abs(rep.minimizer[free] - ref)) < 1e-5
        checked += 1
    assert checked >= 50


def test_certificate_and_start_independence():
    rng = np.random.default_rng(3)
    for k in range(20):
        obj, _, free = _random_instance(rng, with_smooth=k % 2 == 1, with_rho=False)
        tol = 1e-10
        r1 = solve_composite(obj, x0=rng.standard_normal(obj.n), tol=tol)
        r2 = solve_composite(obj, x0=5 * rng.standard_normal(obj.n), tol=tol)
        assert np.max(np.abs(r1.minimizer - r2.minimizer)) <= 10 * tol
        z = r1.certificate
        rv = obj.row_values(r1.minimizer)
        act = np.flatnonzero(np.any(obj.rows[:, free].toarray() != 0, axis=1))
        assert np.all(np.abs(z) <= 1.0)
        nz = act[np.abs(rv[act]) > 1e-12]
        np.testing.assert_array_equal(z[nz], np.sign(rv[nz]))
        _, g = obj.smooth_value_grad(r1.minimizer)
        kkt = (g + obj.rows.T @ (obj.weights * z))[free]
        assert np.linalg.norm(kkt) <= 1e-8


def test_objective_trace_monotone():
    rng = np.random.default_rng(11)
    for k in range(10):
        obj, _, _ = _random_instance(rng, with_smooth=k % 2 == 0, with_rho=True)
        rep = solve_composite(obj, tol=1e-12)
        assert np.max(np.diff(rep.objective_trace), initial=0.0) <= 1e-12


def test_overlapping_rows_rejected():
    rows = sp.csr_matrix(np.array([[1.0, -1.0], [0.0, 1.0]]))
    with pytest.raises(ModelError):
        CompositeObjective(n=2, pinned=[], pinned_values=[], hessian=np.eye(2), rows=rows,
                           weights=np.ones(2))


def test_iteration_cap_raises():
    obj = CompositeObjective(n=2, pinned=[], pinned_values=[],
                             hessian=np.array([[1.0, 0.0], [0.0, 100.0]]),
                             linear=np.array([5.0, 1.0]), smooth=lambda v: (0.0, np.zeros(2)))
    with pytest.raises(ConvergenceError) as info:
        solve_composite(obj, tol=1e-14, max_iter=2)
    assert info.value.residuals


def test_tol_must_be_positive():
    obj = CompositeObjective(n=1, pinned=[], pinned_values=[], hessian=np.eye(1))
    with pytest.raises(ValueError):
        solve_composite(obj, tol=0.0)


# ---------------------------------------------------------------- Lipschitz estimate

def test_lipschitz_identity_and_diagonal():
    assert estimate_lipschitz(lambda v: (0.5 * v @ v, v), 3) == pytest.approx(1.1, rel=1e-8)
    D = np.array([1.0, 4.0])
    assert estimate_lipschitz(lambda v: (0.5 * v @ (D * v), D * v), 2) == pytest.approx(4.4, rel=1e-6)


def test_lipschitz_stiffness_matches_dense_eigenvalue():
    prob = build_problem(1, 0.5, 40, FractureParams(2.0), "w1d")
    K = prob.K
    est = estimate_lipschitz(lambda v: (0.5 * v @ (K @ v), K @ v), prob.mesh.n_nodes)
    assert est / 1.1 == pytest.approx(dense_max_eig(K), rel=1e-2)


def test_lipschitz_errors():
    with pytest.raises(ValueError):
        estimate_lipschitz(lambda v: (0.0, v), 2, iters=10)
    with pytest.raises(FloatingPointError):
        estimate_lipschitz(lambda v: (0.0, np.full(2, np.nan)), 2)


# ---------------------------------------------------------------- gradient check

def test_grad_check_quadratic():
    # central differences are exact for quadratics; what is left is roundoff
    # of order eps |f| / h, below 1e-10 for states of unit size
    rng = np.random.default_rng(0)
    for _ in range(10):
        err, skipped = grad_check(lambda v: (0.5 * v @ v, v), rng.uniform(-1, 1, 4))
        assert err <= 1e-10 and not skipped.any()


def test_grad_check_fracture_smooth_part():
    rng = np.random.default_rng(5)
    prob = build_problem(2, 0.5, 2, FractureParams(0.7, 0.5), "w2")
    for _ in range(20):
        v = rng.uniform(-1, 1, prob.mesh.n_nodes)
        err, skipped = grad_check(prob.model.smooth_value_grad, v, h=1e-6,
                                  near_kink=prob.near_kink)
        assert err <= 1e-5
        assert skipped.sum() < prob.mesh.n_nodes


def test_grad_check_flags_kink():
    prob = build_problem(1, 0.5, 4, FractureParams(0.5), "w1d")
    v = np.zeros(prob.mesh.n_nodes)
    v[prob.mesh.jump_pairs[0, 1]:] = 0.5          # jump exactly R
    _, skipped = grad_check(prob.model.smooth_value_grad, v, near_kink=prob.near_kink)
    assert skipped[prob.mesh.jump_pairs[0]].all()


# ---------------------------------------------------------------- strong convexity

def test_probe_identity():
    obj = CompositeObjective(n=3, pinned=[], pinned_values=[], hessian=np.eye(3))
    assert strong_convexity_probe(obj) == pytest.approx(1.0, abs=1e-9)


def test_probe_detects_concave_remainder():
    R = 2.0

    def rho(s):
        return cohesive_remainder(s, R)

    obj = CompositeObjective(n=1, pinned=[], pinned_values=[], rows=np.eye(1),
                             row_smooth=rho, row_curvature=np.array([1 / R]))
    assert strong_convexity_probe(obj, samples=200) == pytest.approx(-1.0 / R, abs=1e-9)


@pytest.mark.parametrize("dim, N, R, kappa", [(1, 40, 2.0, 1.0), (1, 40, 0.5, 1.0),
                                              (2, 4, 1.0, 0.5), (2, 4, 0.4, 0.5)])
def test_probe_positive_for_fracture_with_default_eta(dim, N, R, kappa):
    prob = build_problem(dim, 0.5, N, FractureParams(R, kappa), "w1d" if dim == 1 else "w1")
    n = prob.mesh.n_nodes
    obj = build_subproblem(prob.model, Dissipation.off(n), prob.constraint,
                           np.zeros(len(prob.constraint.dofs)), np.zeros(n), np.zeros(n))
    assert strong_convexity_probe(obj, samples=200, scale=0.3) > 0


def test_probe_needs_samples():
    obj = CompositeObjective(n=1, pinned=[], pinned_values=[], hessian=np.eye(1))
    with pytest.raises(ValueError):
        strong_convexity_probe(obj, samples=50)

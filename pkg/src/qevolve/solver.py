"""Accelerated proximal-gradient solver for the strongly convex subproblems.

Every subproblem has the form

    minimize   0.5 * v' H v - c' v + smooth(v)
               + sum_k [ w_k |a_k' v + b_k| + rho_k(a_k' v + b_k) ]
    subject to v[pinned] = values

where the rows ``a_k`` act on pairwise disjoint sets of free DOFs, so the
proximal map of the weighted l1 term is closed-form row by row.  ``rho`` is an
optional C^{1,1} function of the row values (the concave remainder of the
cohesive density in the fracture model).

Constraints are handled by eliminating the pinned DOFs.  When there is no
general ``smooth`` term, the quadratic part is additionally minimized out
exactly and the iteration runs on the row values only (a Schur complement of
size ``m``), which keeps the step size independent of the mesh.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .exceptions import ConvergenceError, ModelError

logger = logging.getLogger(__name__)

SmoothFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]

_EPS = np.finfo(float).eps


def soft_threshold(x, lam):
    """Proximal map of ``lam * |.|``: ``sign(x) * max(|x| - lam, 0)``.

    Works elementwise on arrays; ``lam`` may be an array of the same shape.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("threshold must be nonnegative")
    x = np.asarray(x, dtype=float)
    out = np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class CompositeObjective:
    """Strongly convex composite objective over a pinned affine slice.

    Parameters
    ----------
    n : int
        Full dimension of the state vector.
    pinned : ndarray of int
        Indices of DOFs fixed to ``pinned_values``.
    pinned_values : ndarray
        Values of the pinned DOFs.
    hessian : sparse or dense (n, n), optional
        Quadratic part ``H`` (symmetric).  Objective contains ``0.5 v'Hv - c'v``.
    linear : ndarray (n,), optional
        Linear coefficient ``c``.
    smooth : callable, optional
        Extra smooth term ``v -> (value, gradient)`` on full vectors.
    rows : sparse (m, n), optional
        Linear functionals of the nonsmooth term.
    offsets : ndarray (m,), optional
        Row offsets ``b``.
    weights : ndarray (m,), optional
        Nonnegative l1 weights ``w``.
    row_smooth : callable, optional
        ``s -> (values, gradients)`` of the C^{1,1} row remainder ``rho``,
        already weighted, evaluated on all ``m`` row values.
    row_curvature : ndarray (m,), optional
        Bound on ``|rho_k''|``, used for the step size.
    """

    n: int
    pinned: np.ndarray
    pinned_values: np.ndarray
    hessian: Optional[object] = None
    linear: Optional[np.ndarray] = None
    smooth: Optional[SmoothFn] = None
    rows: Optional[sp.csr_matrix] = None
    offsets: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    row_smooth: Optional[Callable] = None
    row_curvature: Optional[np.ndarray] = None
    reduction: Optional["Reduction"] = field(default=None, repr=False)

    def __post_init__(self):
        self.pinned = np.asarray(self.pinned, dtype=int)
        self.pinned_values = np.asarray(self.pinned_values, dtype=float)
        if self.pinned.shape != self.pinned_values.shape:
            raise ValueError("pinned indices and values differ in shape")
        if len(np.unique(self.pinned)) != len(self.pinned):
            raise ValueError("duplicate pinned DOFs")
        mask = np.ones(self.n, dtype=bool)
        mask[self.pinned] = False
        self.free = np.flatnonzero(mask)
        if self.linear is None:
            self.linear = np.zeros(self.n)
        if self.rows is None:
            self.rows = sp.csr_matrix((0, self.n))
        else:
            self.rows = sp.csr_matrix(self.rows)
        m = self.rows.shape[0]
        self.offsets = np.zeros(m) if self.offsets is None else np.asarray(self.offsets, float)
        self.weights = np.zeros(m) if self.weights is None else np.asarray(self.weights, float)
        if np.any(self.weights < 0):
            raise ValueError("nonsmooth weights must be nonnegative")
        if self.row_curvature is None:
            self.row_curvature = np.zeros(m)
        _check_disjoint(self.rows[:, self.free])

    @property
    def m(self) -> int:
        return self.rows.shape[0]

    def embed(self, x: np.ndarray) -> np.ndarray:
        v = np.empty(self.n)
        v[self.free] = x
        v[self.pinned] = self.pinned_values
        return v

    def row_values(self, v: np.ndarray) -> np.ndarray:
        return self.rows @ v + self.offsets

    def smooth_value_grad(self, v: np.ndarray) -> tuple[float, np.ndarray]:
        """Value and full gradient of everything except the l1 term."""
        val = 0.0
        grad = np.zeros(self.n)
        if self.hessian is not None:
            hv = self.hessian @ v
            val += 0.5 * float(v @ hv)
            grad += hv
        val -= float(self.linear @ v)
        grad -= self.linear
        if self.smooth is not None:
            sv, sg = self.smooth(v)
            val += sv
            grad += sg
        if self.row_smooth is not None and self.m:
            rv, rg = self.row_smooth(self.row_values(v))
            val += float(np.sum(rv))
            grad += self.rows.T @ rg
        return val, grad

    def value(self, v: np.ndarray) -> float:
        val, _ = self.smooth_value_grad(v)
        return val + float(self.weights @ np.abs(self.row_values(v)))

    def subgradient(self, v: np.ndarray) -> np.ndarray:
        """One element of the full subdifferential (sign(0) = 0)."""
        _, grad = self.smooth_value_grad(v)
        z = np.sign(self.row_values(v))
        return grad + self.rows.T @ (self.weights * z)


@dataclass
class SolveReport:
    minimizer: np.ndarray
    iterations: int
    residual: float
    objective: float
    certificate: np.ndarray
    objective_trace: list = field(default_factory=list, repr=False)


def _check_disjoint(rows_free: sp.csr_matrix) -> None:
    if rows_free.shape[0] == 0:
        return
    pattern = rows_free.copy()
    pattern.data = np.ones_like(pattern.data)
    pattern.eliminate_zeros()
    counts = np.asarray(pattern.sum(axis=0)).ravel()
    if np.any(counts > 1):
        raise ModelError("nonsmooth rows overlap on free DOFs; prox is not separable")


class Reduction:
    """Cached factorization of the quadratic part restricted to free DOFs.

    Holds ``H_ff`` (Cholesky), ``B = H_ff^{-1} A_f'`` and the inverse Schur
    complement ``P = (A_f H_ff^{-1} A_f')^{-1}`` for the active rows.  The
    same reduction is valid for every subproblem of an evolution, since only
    ``c``, ``b`` and the pinned values change.
    """

    def __init__(self, hessian, rows: sp.csr_matrix, free: np.ndarray, pinned: np.ndarray):
        H = hessian.toarray() if sp.issparse(hessian) else np.asarray(hessian, dtype=float)
        self.free = np.asarray(free)
        self.pinned = np.asarray(pinned)
        self.H_ff = H[np.ix_(self.free, self.free)]
        self.H_fp = H[np.ix_(self.free, self.pinned)]
        try:
            self.chol = sla.cho_factor(self.H_ff, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ModelError("quadratic part is not positive definite on free DOFs") from exc
        A = sp.csr_matrix(rows)
        A_f = A[:, self.free].toarray()
        A_p = A[:, self.pinned].toarray()
        self.active = np.flatnonzero(np.any(A_f != 0.0, axis=1))
        self.A_f = A_f[self.active]
        self.A_p_all = A_p
        if len(self.active):
            self.B = sla.cho_solve(self.chol, self.A_f.T)
            S = self.A_f @ self.B
            self.P = np.linalg.inv(0.5 * (S + S.T))
            self.P = 0.5 * (self.P + self.P.T)
        else:
            self.B = np.zeros((len(self.free), 0))
            self.P = np.zeros((0, 0))
        self._lip = None

    def matches(self, obj: CompositeObjective) -> bool:
        return (
            np.array_equal(self.free, obj.free)
            and np.array_equal(self.pinned, obj.pinned)
        )

    def lipschitz(self, seed: int = 0) -> float:
        if self._lip is None:
            m = self.P.shape[0]
            if m == 0:
                self._lip = 0.0
            else:
                P = self.P
                self._lip = estimate_lipschitz(
                    lambda s: (0.5 * float(s @ P @ s), P @ s), m, iters=200, seed=seed
                )
        return self._lip


def prepare_reduction(obj: CompositeObjective) -> Reduction:
    if obj.hessian is None:
        raise ModelError("reduction requires an explicit quadratic part")
    return Reduction(obj.hessian, obj.rows, obj.free, obj.pinned)


def estimate_lipschitz(smooth: SmoothFn, dim: int, iters: int = 100, seed: int = 0,
                       x: Optional[np.ndarray] = None, safety: float = 1.1) -> float:
    """Power-iteration estimate of the dominant curvature of ``smooth``.

    Iterates ``d -> grad(x + d) - grad(x)``, which is exact for quadratics,
    and returns the final Rayleigh quotient inflated by ``safety``.
    """
    if iters < 20:
        raise ValueError("iters must be at least 20")
    rng = np.random.default_rng(seed)
    x = np.zeros(dim) if x is None else np.asarray(x, dtype=float)
    _, g0 = smooth(x)
    if not np.all(np.isfinite(g0)):
        raise FloatingPointError("non-finite gradient")
    d = rng.standard_normal(dim)
    d /= np.linalg.norm(d)
    lam = 0.0
    for _ in range(iters):
        _, g = smooth(x + d)
        hd = g - g0
        if not np.all(np.isfinite(hd)):
            raise FloatingPointError("non-finite gradient")
        lam = float(d @ hd)
        nrm = np.linalg.norm(hd)
        if nrm == 0.0:
            return 0.0
        d = hd / nrm
    return safety * abs(lam)


def _certificate(grad_rows: np.ndarray, row_vals: np.ndarray, weights: np.ndarray,
                 row_norm_sq: np.ndarray, zero_tol=0.0) -> np.ndarray:
    """Subgradient selection of the l1 term from prox optimality.

    Rows with ``|value| <= zero_tol`` count as closed (the prox puts them at
    zero, up to roundoff in the reconstruction).
    """
    z = np.sign(row_vals)
    zero = np.abs(row_vals) <= zero_tol
    if np.any(zero):
        with np.errstate(divide="ignore", invalid="ignore"):
            zz = -grad_rows[zero] / (weights[zero] * row_norm_sq[zero])
        zz[~np.isfinite(zz)] = 0.0
        z[zero] = np.clip(zz, -1.0, 1.0)
    return z


def _fista(f: Callable, prox: Callable, x0: np.ndarray, L: float, tol: float,
           max_iter: int, backtrack: bool, floor_scale: Callable):
    """FISTA with function-value restart.

    ``f(x) -> (smooth value, smooth grad)``; ``prox(y, step) -> (x, nonsmooth value)``.
    Stops when the prox-gradient mapping norm (at the latest iterate) is below
    ``max(tol, floor)``, where ``floor`` is a roundoff level supplied by
    ``floor_scale``.
    """
    x = x0.copy()
    fx, gx = f(x)
    Fx = fx + prox(x, 0.0)[1]
    y, gy, fy = x, gx, fx
    t = 1.0
    trace = [Fx]
    for it in range(1, max_iter + 1):
        while True:
            x_new, h_new = prox(y - gy / L, 1.0 / L)
            f_new, g_new = f(x_new)
            d = x_new - y
            if not backtrack or f_new <= fy + gy @ d + 0.5 * L * (d @ d) + 1e-14 * (1 + abs(fy)):
                break
            L *= 2.0
        F_new = f_new + h_new
        if F_new > Fx + 1e-15 * (1.0 + abs(Fx)) and t > 1.0:
            # restart momentum from the current iterate
            t = 1.0
            y, gy, fy = x, gx, fx
            continue
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_next) * (x_new - x)
        t = t_next
        x_prev = x
        x, fx, gx, Fx = x_new, f_new, g_new, F_new
        trace.append(Fx)
        # prox-gradient mapping at the new iterate
        x_pg, _ = prox(x - gx / L, 1.0 / L)
        res = L * np.linalg.norm(x - x_pg)
        if res <= max(tol, floor_scale(x, gx)):
            return x, it, res, L, trace
        if np.array_equal(x, x_prev) and np.array_equal(y, x):
            return x, it, res, L, trace
        fy, gy = f(y)
    raise ConvergenceError(
        f"composite solver did not converge in {max_iter} iterations (residual {res:.3e})",
        residuals=[res],
    )


def solve_composite(obj: CompositeObjective, x0: Optional[np.ndarray] = None,
                    tol: float = 1e-14, max_iter: int = 100000, seed: int = 0) -> SolveReport:
    """Minimize a strongly convex composite objective on its pinned slice.

    Parameters
    ----------
    obj : CompositeObjective
    x0 : ndarray, optional
        Full-length start vector; pinned entries are overwritten.
    tol : float
        Target norm of the prox-gradient mapping.  A roundoff floor of a few
        ulps of the gradient scale is applied so that the target is reachable
        in double precision.

    Returns
    -------
    SolveReport
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n_free = len(obj.free)
    x0 = np.zeros(obj.n) if x0 is None else np.asarray(x0, dtype=float)
    if n_free == 0:
        v = obj.embed(np.zeros(0))
        cert = np.sign(obj.row_values(v))
        return SolveReport(v, 0, 0.0, obj.value(v), cert)
    if obj.smooth is None and obj.hessian is not None:
        return _solve_reduced(obj, x0, tol, max_iter, seed)
    return _solve_full(obj, x0, tol, max_iter, seed)


def _solve_reduced(obj, x0, tol, max_iter, seed):
    red = obj.reduction
    if red is None or not red.matches(obj):
        red = prepare_reduction(obj)
        obj.reduction = red
    f_p = obj.pinned_values
    c_f = obj.linear[obj.free] - red.H_fp @ f_p
    x_u = sla.cho_solve(red.chol, c_f)
    b_all = obj.offsets + red.A_p_all @ f_p
    act = red.active
    if len(act) == 0:
        v = obj.embed(x_u)
        return SolveReport(v, 1, 0.0, obj.value(v), np.sign(obj.row_values(v)))
    b = b_all[act]
    w = obj.weights[act]
    s0 = red.A_f @ x_u + b
    P = red.P
    curv = obj.row_curvature[act]
    L = red.lipschitz(seed) + float(np.max(np.abs(curv)))

    def rho(s):
        if obj.row_smooth is None:
            return 0.0, np.zeros_like(s)
        full = np.array(b_all, dtype=float)
        full[act] = s
        rv, rg = obj.row_smooth(full)
        return float(np.sum(rv[act])), rg[act]

    def f(s):
        d = s - s0
        Pd = P @ d
        rv, rg = rho(s)
        return 0.5 * float(d @ Pd) + rv, Pd + rg

    def prox(y, step):
        x = soft_threshold(y, step * w) if step > 0 else y
        return np.atleast_1d(x), float(w @ np.abs(x))

    def floor(s, g):
        scale = np.max(np.abs(P)) * (np.max(np.abs(s)) + np.max(np.abs(s0)) + 1.0)
        return 64.0 * _EPS * scale * np.sqrt(len(s))

    v_start = obj.embed(np.asarray(x0)[obj.free])
    s_start = (obj.rows @ v_start + obj.offsets)[act]
    s, its, res, _, trace = _fista(f, prox, s_start, L, tol, max_iter, False, floor)
    lam = P @ (s0 - s)
    x = x_u - red.B @ lam
    v = obj.embed(x)
    _, g = f(s)
    z_act = _certificate(g, s, w, np.ones(len(s)))
    cert = np.sign(obj.row_values(v))
    cert[act] = z_act
    # constrained rows have a fixed value; keep sign (0 on exact zero)
    return SolveReport(v, its, res, obj.value(v), cert, trace)


def _solve_full(obj, x0, tol, max_iter, seed):
    free = obj.free
    A_f = obj.rows[:, free].tocsr()
    Ad = A_f.toarray()
    row_norm_sq = np.sum(Ad * Ad, axis=1)
    w = obj.weights

    def f(x):
        v = obj.embed(x)
        val, grad = obj.smooth_value_grad(v)
        return val, grad[free]

    b_eff = obj.offsets + obj.rows[:, obj.pinned] @ obj.pinned_values

    def prox(y, step):
        r = A_f @ y + b_eff
        if step > 0 and len(r):
            with np.errstate(divide="ignore", invalid="ignore"):
                theta = np.where(row_norm_sq > 0, r / row_norm_sq, 0.0)
            theta = np.clip(theta, -step * w, step * w)
            y = y - A_f.T @ theta
            r = A_f @ y + b_eff
        return y, float(w @ np.abs(r))

    def floor(x, g):
        return 64.0 * _EPS * (np.max(np.abs(g)) + 1.0) * np.sqrt(len(x))

    x_start = np.asarray(x0, dtype=float)[free]
    L = estimate_lipschitz(f, len(free), iters=50, seed=seed, x=x_start)
    L = max(L, 1e-8)
    x, its, res, _, trace = _fista(f, prox, x_start, L, tol, max_iter, True, floor)
    v = obj.embed(x)
    _, g = f(x)
    r = A_f @ x + b_eff
    band = 16.0 * _EPS * (abs(A_f) @ np.abs(x) + np.abs(b_eff))
    z = _certificate(A_f @ g, r, w, row_norm_sq, zero_tol=band)
    return SolveReport(v, its, res, obj.value(v), z, trace)


def grad_check(smooth: SmoothFn, x: np.ndarray, h: float = 1e-6,
               near_kink: Optional[Callable[[np.ndarray, float], np.ndarray]] = None):
    """Central finite-difference check of an analytic gradient.

    Returns ``(max_error, skipped)`` where the error per component is
    ``|fd - g| / max(1, |g|)`` and ``skipped`` is a boolean mask of components
    left out because ``near_kink(x, 10 * h)`` flagged them.
    """
    x = np.asarray(x, dtype=float)
    _, g = smooth(x)
    skipped = np.zeros(len(x), dtype=bool)
    if near_kink is not None:
        skipped = np.asarray(near_kink(x, 10.0 * h), dtype=bool)
    err = 0.0
    for i in np.flatnonzero(~skipped):
        e = np.zeros_like(x)
        e[i] = h
        fp, _ = smooth(x + e)
        fm, _ = smooth(x - e)
        fd = (fp - fm) / (2.0 * h)
        err = max(err, abs(fd - g[i]) / max(1.0, abs(g[i])))
    return err, skipped


def strong_convexity_probe(obj: CompositeObjective, samples: int = 200, seed: int = 0,
                           scale: float = 1.0) -> float:
    """Minimum monotonicity ratio of the (sub)gradient map on the pinned slice.

    Half of the pairs are far apart, half are close (``1e-3 * scale``), so that
    local concavity is detected.  A positive minimum is empirical evidence of
    strong convexity.
    """
    if samples < 100:
        raise ValueError("samples must be at least 100")
    rng = np.random.default_rng(seed)
    k = len(obj.free)
    if k == 0:
        return np.inf
    ratio = np.inf
    for i in range(samples):
        x = scale * rng.standard_normal(k)
        if i % 2:
            y = x + 1e-3 * scale * rng.standard_normal(k)
        else:
            y = scale * rng.standard_normal(k)
        vx, vy = obj.embed(x), obj.embed(y)
        gx = obj.subgradient(vx)[obj.free]
        gy = obj.subgradient(vy)[obj.free]
        d = x - y
        ratio = min(ratio, float((gx - gy) @ d) / float(d @ d))
    return ratio

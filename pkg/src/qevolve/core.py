"""Time-stepped evolution of constrained critical points.

The engine is generic in the energy: anything expressible as

    J(v) = 0.5 v'Qv + smooth(v) + sum_k w_k (|d_k' v| + rho_k(d_k' v))

with disjoint nonsmooth rows ``d_k``.  At every grid time the state is moved
to a critical point on the new affine slice by the fixed-eta proximal loop

    v_j = argmin_{Av = f(t_i)}  J(v) + eta |v - v_{j-1}|_G^2 + alpha psi(v - v_0),

started at the previous state ``v_0``.  ``G`` is an SPD Gram matrix (identity
unless the model supplies one).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .exceptions import ConvergenceError, ModelError, StationarityError
from .solver import CompositeObjective, _certificate, solve_composite

logger = logging.getLogger(__name__)


def _as_state(v, dim: Optional[int] = None) -> np.ndarray:
    v = np.asarray(v, dtype=float).ravel()
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"state has dimension {v.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise ValueError("state has non-finite entries")
    return v


@dataclass
class EnergyModel:
    """Energy ``J`` split into a smooth part and a separable weighted-l1 part.

    Parameters
    ----------
    dim : int
        Dimension of the state space.
    eta : float
        Convexification parameter: ``J + eta |.|_G^2`` must be strongly convex.
    quadratic : sparse (dim, dim), optional
        Symmetric PSD matrix ``Q`` of the quadratic part ``0.5 v'Qv``.
    smooth : callable, optional
        Further smooth term ``v -> (value, gradient)``.
    rows, weights : optional
        Nonsmooth rows ``d_k`` (sparse) and weights ``w_k >= 0``.
    row_smooth : callable, optional
        ``s -> (values, gradients)``, the C^{1,1} remainder on the row values,
        already weighted.
    row_curvature : ndarray, optional
        Bound on the curvature of ``row_smooth`` per row.
    metric : sparse (dim, dim), optional
        Gram matrix of the state norm.  Identity when omitted.
    energy_fn : callable, optional
        Accurate evaluation of ``J`` (used in ledgers instead of the sum of
        parts, e.g. to avoid cancellation in ``0.5 v'Qv``).
    """

    dim: int
    eta: float
    quadratic: Optional[sp.spmatrix] = None
    smooth: Optional[Callable] = None
    rows: Optional[sp.spmatrix] = None
    weights: Optional[np.ndarray] = None
    row_smooth: Optional[Callable] = None
    row_curvature: Optional[np.ndarray] = None
    metric: Optional[sp.spmatrix] = None
    energy_fn: Optional[Callable] = None

    def __post_init__(self):
        if self.eta < 0:
            raise ModelError("eta must be nonnegative")
        if self.rows is None:
            self.rows = sp.csr_matrix((0, self.dim))
        self.rows = sp.csr_matrix(self.rows)
        m = self.rows.shape[0]
        self.weights = np.zeros(m) if self.weights is None else np.asarray(self.weights, float)
        if self.weights.shape != (m,) or np.any(self.weights < 0):
            raise ModelError("weights must be nonnegative, one per row")
        if self.row_curvature is None:
            self.row_curvature = np.zeros(m)
        if self.metric is None:
            self.metric = sp.identity(self.dim, format="csr")
        self.metric = sp.csr_matrix(self.metric)
        if self.quadratic is not None:
            self.quadratic = sp.csr_matrix(self.quadratic)

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    def smooth_value_grad(self, v: np.ndarray) -> tuple[float, np.ndarray]:
        val, grad = 0.0, np.zeros(self.dim)
        if self.quadratic is not None:
            qv = self.quadratic @ v
            val += 0.5 * float(v @ qv)
            grad += qv
        if self.smooth is not None:
            sv, sg = self.smooth(v)
            val += sv
            grad += sg
        if self.row_smooth is not None and self.n_rows:
            rv, rg = self.row_smooth(self.rows @ v)
            val += float(np.sum(rv))
            grad += self.rows.T @ rg
        return val, grad

    def nonsmooth_value(self, v: np.ndarray) -> float:
        return float(self.weights @ np.abs(self.rows @ v))

    def energy(self, v) -> float:
        v = _as_state(v, self.dim)
        if self.energy_fn is not None:
            return float(self.energy_fn(v))
        return self.smooth_value_grad(v)[0] + self.nonsmooth_value(v)

    def subgradient(self, v, certificate: Optional[np.ndarray] = None) -> np.ndarray:
        """An element of the subdifferential of ``J`` at ``v``.

        ``certificate`` selects the l1 subgradient per row; otherwise
        ``sign(d_k' v)`` is used (0 at kinks).
        """
        v = _as_state(v, self.dim)
        _, grad = self.smooth_value_grad(v)
        z = np.sign(self.rows @ v) if certificate is None else np.asarray(certificate)
        return grad + self.rows.T @ (self.weights * z)

    def norm_sq(self, d: np.ndarray) -> float:
        return float(d @ (self.metric @ d))


@dataclass(frozen=True)
class Dissipation:
    """Weighted-l1 dissipation ``psi(v) = sum_i w_i |v_i|``; off when not enabled."""

    weights: np.ndarray
    enabled: bool = True

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if np.any(w < 0):
            raise ModelError("dissipation weights must be nonnegative")
        if self.enabled and np.any(w <= 0):
            raise ModelError("enabled dissipation needs positive weights (psi(v) = 0 iff v = 0)")

    @classmethod
    def off(cls, dim: int) -> "Dissipation":
        return cls(np.zeros(dim), enabled=False)

    @property
    def alpha(self) -> int:
        return int(self.enabled)

    def __call__(self, v) -> float:
        if not self.enabled:
            return 0.0
        return float(self.weights @ np.abs(np.asarray(v, dtype=float)))

    def norm_constant(self) -> float:
        """``c`` with ``|v|/c <= psi(v) <= c |v|`` (Euclidean norm)."""
        if not self.enabled:
            raise ModelError("dissipation is disabled")
        n = len(self.weights)
        return max(np.sqrt(n) * float(self.weights.max()), 1.0 / float(self.weights.min()))


@dataclass(frozen=True)
class AffineConstraint:
    """Selection operator ``A v = v[dofs]``."""

    dofs: np.ndarray
    dim: int

    def __post_init__(self):
        d = np.asarray(self.dofs, dtype=int).ravel()
        object.__setattr__(self, "dofs", d)
        if len(d) == 0:
            raise ModelError("constraint selects no DOFs")
        if len(np.unique(d)) != len(d):
            raise ModelError("duplicate constrained DOFs")
        if d.min() < 0 or d.max() >= self.dim:
            raise ModelError("constrained DOF out of range")

    gamma = 1.0

    def apply(self, v) -> np.ndarray:
        return np.asarray(v)[self.dofs]

    def adjoint(self, q) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.dofs] = q
        return out

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.dim, dtype=bool)
        mask[self.dofs] = False
        return np.flatnonzero(mask)


@dataclass(frozen=True)
class LoadPath:
    """Time-dependent datum ``f(t)`` on the constrained DOFs, with its rate."""

    eval: Callable[[float], np.ndarray]
    rate: Callable[[float], np.ndarray]
    horizon: float

    def __call__(self, t: float) -> np.ndarray:
        return np.asarray(self.eval(t), dtype=float)

    @classmethod
    def linear(cls, base, horizon: float, offset=None) -> "LoadPath":
        """``f(t) = offset + t * base``."""
        base = np.asarray(base, dtype=float)
        off = np.zeros_like(base) if offset is None else np.asarray(offset, dtype=float)
        return cls(lambda t: off + t * base, lambda t: base.copy(), horizon)


@dataclass
class InnerResult:
    state: np.ndarray
    iterations: int
    residuals: list
    objectives: list
    previous: np.ndarray
    certificate: np.ndarray
    solver_iterations: int

    @property
    def max_increase(self) -> float:
        """Largest increase of the objective sequence over ``j >= 2``."""
        obj = np.asarray(self.objectives)
        if len(obj) < 2:
            return 0.0
        return float(max(0.0, np.max(np.diff(obj))))


@dataclass
class DiscreteEvolution:
    """Piecewise-constant trajectory on the grid ``t_i = i * delta``."""

    delta: float
    times: np.ndarray
    states: np.ndarray
    multipliers: np.ndarray
    ledger: list
    inner: list = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.times)

    def index_at(self, t: float) -> int:
        """Grid index of the value at time ``t`` (right-continuous)."""
        i = int(np.floor(t / self.delta + 1e-9))
        return min(max(i, 0), len(self.times) - 1)

    def state_at(self, t: float) -> np.ndarray:
        return self.states[self.index_at(t)]

    @property
    def energies(self) -> np.ndarray:
        return np.array([row["energy"] for row in self.ledger])

    def bounds(self) -> dict:
        """Sup norms of states and multipliers over the trajectory."""
        return {
            "max_state": float(np.max(np.abs(self.states))),
            "max_multiplier": float(np.max(np.abs(self.multipliers))) if self.multipliers.size else 0.0,
        }

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "times": self.times.tolist(),
            "states": self.states.tolist(),
            "multipliers": self.multipliers.tolist(),
            "ledger": self.ledger,
            "bounds": self.bounds(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DiscreteEvolution":
        return cls(
            delta=float(data["delta"]),
            times=np.asarray(data["times"], dtype=float),
            states=np.asarray(data["states"], dtype=float),
            multipliers=np.asarray(data["multipliers"], dtype=float),
            ledger=list(data["ledger"]),
        )


def inner_objective(v, v_prev, v_anchor, model: EnergyModel, psi: Dissipation) -> float:
    """``J(v) + eta |v - v_prev|_G^2 + alpha psi(v - v_anchor)``."""
    v = _as_state(v, model.dim)
    v_prev = _as_state(v_prev, model.dim)
    v_anchor = _as_state(v_anchor, model.dim)
    return model.energy(v) + model.eta * model.norm_sq(v - v_prev) + psi(v - v_anchor)


def build_subproblem(model: EnergyModel, psi: Dissipation, constraint: AffineConstraint,
                     target, v_prev, v_anchor, reduction=None) -> CompositeObjective:
    """Composite objective of one proximal step (up to an additive constant)."""
    m = model.n_rows
    H = 2.0 * model.eta * model.metric
    if model.quadratic is not None:
        H = H + model.quadratic
    c = 2.0 * model.eta * (model.metric @ v_prev)
    rows, offsets, weights, curv = model.rows, np.zeros(m), model.weights, model.row_curvature
    if psi.enabled:
        dofs = np.arange(model.dim)
        prow = sp.csr_matrix((np.ones(model.dim), (dofs, dofs)), shape=(model.dim, model.dim))
        rows = sp.vstack([rows, prow], format="csr")
        offsets = np.concatenate([offsets, -np.asarray(v_anchor, float)])
        weights = np.concatenate([weights, psi.weights])
        curv = np.concatenate([curv, np.zeros(model.dim)])
    row_smooth = None
    if model.row_smooth is not None and m:
        total = rows.shape[0]

        def row_smooth(s, _f=model.row_smooth):
            vals, grads = np.zeros(total), np.zeros(total)
            rv, rg = _f(s[:m])
            vals[:m], grads[:m] = rv, rg
            return vals, grads

    obj = CompositeObjective(
        n=model.dim,
        pinned=constraint.dofs,
        pinned_values=np.asarray(target, dtype=float),
        hessian=H,
        linear=c,
        smooth=model.smooth,
        rows=rows,
        offsets=offsets,
        weights=weights,
        row_smooth=row_smooth,
        row_curvature=curv,
        reduction=reduction,
    )
    return obj


def inner_critical_loop(model: EnergyModel, psi: Dissipation, constraint: AffineConstraint,
                        target, v_start, tol_inner: float = 1e-13, max_iter: int = 100000,
                        solver_tol: Optional[float] = None, reduction=None,
                        seed: int = 0) -> InnerResult:
    """Fixed-eta proximal iteration towards a critical point on ``{Av = target}``.

    Stops once ``|v_j - v_{j-1}| < tol_inner`` (Euclidean).  Raises
    ``ConvergenceError`` carrying the residual history after ``max_iter``
    iterations.
    """
    if tol_inner <= 0:
        raise ValueError("tol_inner must be positive")
    v = _as_state(v_start, model.dim)
    anchor = v.copy()
    solver_tol = tol_inner / 10.0 if solver_tol is None else solver_tol
    residuals, objectives = [], []
    solver_its = 0
    red = reduction
    for j in range(1, max_iter + 1):
        obj = build_subproblem(model, psi, constraint, target, v, anchor, reduction=red)
        rep = solve_composite(obj, x0=v, tol=solver_tol, seed=seed)
        red = obj.reduction
        solver_its += rep.iterations
        v_new = rep.minimizer
        res = float(np.linalg.norm(v_new - v))
        residuals.append(res)
        objectives.append(model.energy(v_new) + psi(v_new - anchor))
        v_prev, v = v, v_new
        if res < tol_inner:
            return InnerResult(v, j, residuals, objectives, v_prev, rep.certificate, solver_its)
    raise ConvergenceError(
        f"inner loop did not reach {tol_inner:g} in {max_iter} iterations "
        f"(last residual {residuals[-1]:.3e})",
        residuals=residuals,
    )


def recover_multiplier(model: EnergyModel, psi: Dissipation, constraint: AffineConstraint,
                       v, v_prev, v_anchor=None, certificate=None, tol_kkt: float = 1e-8,
                       check: bool = True):
    """Reaction ``q`` on the constrained DOFs and the free-DOF residual.

    ``q`` is the constrained part of ``grad_smooth(v) + xi + 2 eta G (v - v_prev)
    + alpha zeta``, with ``xi`` and ``zeta`` subgradients of the l1 parts.  At
    kinks the subgradient comes from ``certificate`` when given, otherwise it
    is chosen to minimize the free residual row by row.
    """
    v = _as_state(v, model.dim)
    v_prev = _as_state(v_prev, model.dim)
    anchor = v_prev if v_anchor is None else _as_state(v_anchor, model.dim)
    obj = build_subproblem(model, psi, constraint, constraint.apply(v), v_prev, anchor)
    _, grad = obj.smooth_value_grad(v)
    rv = obj.row_values(v)
    free = constraint.free
    A_f = obj.rows[:, free]
    norm_sq = np.asarray(A_f.multiply(A_f).sum(axis=1)).ravel()
    z = _certificate(A_f @ grad[free], rv, obj.weights, norm_sq)
    if certificate is not None:
        # the solver's selection refers to its own row values, which may differ
        # from rv by roundoff
        cert = np.asarray(certificate, dtype=float)
        k = min(len(cert), len(z))
        z[:k] = np.clip(cert[:k], -1.0, 1.0)
    total = grad + obj.rows.T @ (obj.weights * z)
    q = total[constraint.dofs]
    residual = float(np.linalg.norm(total[free]))
    if check and residual > tol_kkt:
        raise StationarityError(f"free-DOF residual {residual:.3e} exceeds {tol_kkt:g}", residual)
    return q, residual


def discrete_evolution(model: EnergyModel, psi: Dissipation, constraint: AffineConstraint,
                       load: LoadPath, v0, delta: float, tol_inner: float = 1e-13,
                       tol_feas: float = 1e-6, T: Optional[float] = None,
                       max_iter: int = 100000, solver_tol: Optional[float] = None,
                       tol_kkt: float = 1e-8, seed: int = 0) -> DiscreteEvolution:
    """Discrete quasistatic evolution on the grid ``i * delta <= T``.

    Each state is the output of :func:`inner_critical_loop` started from the
    previous one.  The ledger stores per step the energy, the dissipation
    increment, the virtual power ``0.5 <q_i + q_{i-1}, f(t_i) - f(t_{i-1})>``,
    the inner iteration count, feasibility error, KKT residual and the largest
    increase of the inner objective sequence.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta out of (0,1)")
    T = load.horizon if T is None else T
    v0 = _as_state(v0, model.dim)
    f0 = load(0.0)
    feas0 = float(np.linalg.norm(constraint.apply(v0) - f0))
    if feas0 >= tol_feas:
        raise ValueError(f"initial state violates the constraint by {feas0:.3e}")
    n_steps = int(np.floor(T / delta + 1e-9))
    times = delta * np.arange(n_steps + 1)
    q0, r0 = recover_multiplier(model, psi, constraint, v0, v0, check=False)
    states = [v0]
    mults = [q0]
    ledger = [dict(step=0, t=0.0, energy=model.energy(v0), psi_increment=0.0,
                   virtual_power=0.0, inner_iters=0, feas_error=feas0, kkt_residual=r0,
                   max_objective_increase=0.0)]
    inner_log = [None]
    red = None
    f_prev = f0
    for i in range(1, n_steps + 1):
        t = float(times[i])
        target = load(t)
        try:
            res = inner_critical_loop(model, psi, constraint, target, states[-1],
                                      tol_inner=tol_inner, max_iter=max_iter,
                                      solver_tol=solver_tol, reduction=red, seed=seed)
        except ConvergenceError as exc:
            exc.partial = _assemble(delta, times[:i], states, mults, ledger, inner_log)
            raise
        v = res.state
        q, r = recover_multiplier(model, psi, constraint, v, res.previous, states[-1],
                                  certificate=res.certificate, tol_kkt=tol_kkt, check=False)
        if r > tol_kkt:
            logger.warning("step %d: KKT residual %.3e above %.1e", i, r, tol_kkt)
        feas = float(np.linalg.norm(constraint.apply(v) - target))
        power = 0.5 * float((q + mults[-1]) @ (target - f_prev))
        ledger.append(dict(step=i, t=t, energy=model.energy(v),
                           psi_increment=psi(v - states[-1]), virtual_power=power,
                           inner_iters=res.iterations, feas_error=feas, kkt_residual=r,
                           max_objective_increase=res.max_increase))
        inner_log.append(res)
        logger.debug("step %d t=%.4f iters=%d J=%.6g", i, t, res.iterations, ledger[-1]["energy"])
        states.append(v)
        mults.append(q)
        f_prev = target
    traj = _assemble(delta, times, states, mults, ledger, inner_log)
    b = traj.bounds()
    logger.info("evolution done: %d steps, sup|v|=%.4g, sup|q|=%.4g",
                n_steps, b["max_state"], b["max_multiplier"])
    return traj


def _assemble(delta, times, states, mults, ledger, inner_log) -> DiscreteEvolution:
    return DiscreteEvolution(delta=delta, times=np.asarray(times, dtype=float),
                             states=np.array(states), multipliers=np.array(mults),
                             ledger=list(ledger), inner=list(inner_log))


def _grid_index(traj: DiscreteEvolution, t: float) -> int:
    return int(np.floor(t / traj.delta + 1e-9))


def psi_variation(traj: DiscreteEvolution, psi: Dissipation, t1: float, t2: float) -> float:
    """Sum of ``psi(v(t_i) - v(t_{i-1}))`` over grid times ``t_i`` in ``(t1, t2]``."""
    if not 0.0 <= t1 <= t2:
        raise ValueError("need 0 <= t1 <= t2")
    if not psi.enabled:
        warnings.warn("dissipation disabled; psi-variation is 0", stacklevel=2)
        return 0.0
    i1 = _grid_index(traj, t1)
    i2 = min(_grid_index(traj, t2), len(traj) - 1)
    s = traj.states
    return math.fsum(psi(s[i] - s[i - 1]) for i in range(i1 + 1, i2 + 1))


@dataclass
class EnergyInequalityReport:
    """Gaps ``LHS - RHS`` for all grid pairs ``i1 < i2`` (upper triangle)."""

    gaps: np.ndarray
    slack: float
    max_gap: float
    passed: bool
    power: np.ndarray

    def segment_max_abs_gap(self, i_end: int) -> float:
        """Largest |gap| over pairs within steps ``0..i_end``."""
        g = self.gaps[: i_end + 1, : i_end + 1]
        iu = np.triu_indices(g.shape[0], k=1)
        return float(np.max(np.abs(g[iu]))) if len(iu[0]) else 0.0


def step_powers(traj: DiscreteEvolution, load: LoadPath) -> np.ndarray:
    """Virtual power per step by the trapezoid rule on the grid multipliers."""
    q = traj.multipliers
    f = np.array([load(t) for t in traj.times])
    p = np.zeros(len(traj))
    if len(traj) > 1:
        p[1:] = 0.5 * np.einsum("ij,ij->i", q[1:] + q[:-1], f[1:] - f[:-1])
    return p


def estimate_slack_coeff(traj: DiscreteEvolution, load: LoadPath) -> float:
    """``C1 |f'| + |f'|^2`` with ``C1 = sup |q|`` and ``|f'|`` the sup of the rate."""
    rate = max(float(np.linalg.norm(load.rate(t))) for t in traj.times)
    c1 = max(float(np.linalg.norm(q)) for q in traj.multipliers)
    return c1 * rate + rate ** 2


def check_energy_inequality(traj: DiscreteEvolution, load: LoadPath, slack_coeff: float,
                            psi: Optional[Dissipation] = None,
                            energies: Optional[np.ndarray] = None) -> EnergyInequalityReport:
    """Discrete energy inequality on every grid pair.

    ``J(v(t2)) [+ Var_psi] - J(v(t1)) - sum of step powers over (t1, t2]`` must
    not exceed ``slack_coeff * sqrt(delta)``.
    """
    J = traj.energies if energies is None else np.asarray(energies, dtype=float)
    p = step_powers(traj, load)
    P = np.cumsum(p)
    if psi is not None and psi.enabled:
        inc = np.zeros(len(traj))
        inc[1:] = [psi(traj.states[i] - traj.states[i - 1]) for i in range(1, len(traj))]
        V = np.cumsum(inc)
    else:
        V = np.zeros(len(traj))
    lhs = J + V
    gaps = (lhs[None, :] - lhs[:, None]) - (P[None, :] - P[:, None])
    gaps = np.triu(gaps, k=1)
    slack = slack_coeff * np.sqrt(traj.delta)
    iu = np.triu_indices(len(traj), k=1)
    max_gap = float(np.max(gaps[iu])) if len(iu[0]) else 0.0
    return EnergyInequalityReport(gaps, slack, max_gap, bool(max_gap <= slack), p)

"""Post-hoc checks on computed fracture trajectories.

Interface fluxes are read off the assembled reactions: for a pair ``(l, r)``
with weight ``w`` the discrete normal flux is ``(Kv)_l / w``.  At a critical
point it equals ``kappa * xi`` with ``xi = g'(|s|) sign(s)`` on open pairs and
``|xi| <= 1`` on closed ones, while ``(Kv)_l + (Kv)_r = 0``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import DiscreteEvolution
from .fracture import (
    FractureMesh,
    FractureParams,
    analytic_1d_oracle,
    assemble_stiffness,
    fracture_energy,
    g_eval,
    interface_slope,
)

JUMP_TOL = 1e-8


@dataclass
class StationarityReport:
    """Residuals of the discrete stationarity system at one state.

    Attributes
    ----------
    flux_left, flux_right : ndarray
        Normal flux per interface pair, from the left and right copies.
    continuity_gap : float
        ``max |flux_left + flux_right|``.
    closed_violation : float
        ``max (|flux| - kappa)_+`` over pairs with ``|jump| <= jump_tol``.
    flux_law_error : float
        ``max |flux - kappa g'(|jump|) sign(jump)|`` over open pairs.
    interior_residual : float
        Norm of ``Kv`` on nodes that are neither constrained nor on the interface.
    open_pairs : ndarray of bool
    """

    flux_left: np.ndarray
    flux_right: np.ndarray
    continuity_gap: float
    closed_violation: float
    flux_law_error: float
    interior_residual: float
    open_pairs: np.ndarray

    @property
    def max_residual(self) -> float:
        return max(self.continuity_gap, self.closed_violation, self.flux_law_error,
                   self.interior_residual)

    def passed(self, tol: float) -> bool:
        return self.max_residual <= tol

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("flux_left", "flux_right", "open_pairs"):
            d[k] = np.asarray(d[k]).tolist()
        d["max_residual"] = self.max_residual
        return d


def stationarity_residual(v, mesh: FractureMesh, params: FractureParams,
                          jump_tol: float = JUMP_TOL,
                          K: Optional[sp.spmatrix] = None) -> StationarityReport:
    v = np.asarray(v, dtype=float)
    K = assemble_stiffness(mesh) if K is None else K
    kv = K @ v
    left, right = mesh.jump_pairs[:, 0], mesh.jump_pairs[:, 1]
    w = mesh.jump_weights
    fl = kv[left] / w
    fr = -kv[right] / w
    s = mesh.jumps(v)
    is_open = np.abs(s) > jump_tol
    gap = float(np.max(np.abs(fl - fr))) if len(w) else 0.0
    flux = 0.5 * (fl + fr)
    kappa = params.kappa
    closed_viol = np.maximum(np.abs(flux[~is_open]) - kappa, 0.0)
    law = np.array([kappa * g_eval(abs(x), params.R)[1] * np.sign(x) for x in s[is_open]])
    law_err = np.abs(flux[is_open] - law) if len(law) else np.zeros(0)
    interior = np.ones(mesh.n_nodes, dtype=bool)
    interior[mesh.boundary_dofs] = False
    interior[mesh.jump_pairs.ravel()] = False
    return StationarityReport(
        flux_left=fl,
        flux_right=fr,
        continuity_gap=gap,
        closed_violation=float(np.max(closed_viol, initial=0.0)),
        flux_law_error=float(np.max(law_err, initial=0.0)),
        interior_residual=float(np.linalg.norm(kv[interior])),
        open_pairs=is_open,
    )


def crack_initiation_time(traj: DiscreteEvolution, mesh: FractureMesh,
                          jump_tol: float = JUMP_TOL) -> Optional[float]:
    """First grid time with an interface opening above ``jump_tol``."""
    for t, v in zip(traj.times, traj.states):
        if np.max(np.abs(mesh.jumps(v))) > jump_tol:
            return float(t)
    return None


def virtual_power(v, rate_field, mesh: FractureMesh, params: FractureParams,
                  K: Optional[sp.spmatrix] = None) -> float:
    """``v' K w`` for a rate field ``w`` that is continuous across the interface.

    Only the elastic term carries ``kappa``-free stiffness in this model, so
    no further scaling is applied.
    """
    w = np.asarray(rate_field, dtype=float)
    if w.shape != (mesh.n_nodes,):
        raise ValueError("rate field must have one value per node")
    scale = 1.0 + float(np.max(np.abs(w), initial=0.0))
    if np.max(np.abs(mesh.jumps(w)), initial=0.0) > 1e-12 * scale:
        raise ValueError("rate field jumps across the interface; a regular lift is required")
    K = assemble_stiffness(mesh) if K is None else K
    return float(np.asarray(v, dtype=float) @ (K @ w))


def energy_curves(traj: DiscreteEvolution, mesh: FractureMesh,
                  params: FractureParams) -> np.ndarray:
    """Columns ``elastic, crack, total`` per grid time."""
    rows = [fracture_energy(v, mesh, params) for v in traj.states]
    return np.array([(e, c, tot) for tot, e, c in rows]).reshape(-1, 3)


def broken_competitor(mesh: FractureMesh, params: FractureParams, boundary_values) -> np.ndarray:
    """Elastic minimizer with a traction-free interface.

    The two sides decouple; each is the discrete harmonic extension of its own
    boundary data with natural conditions on the crack.
    """
    K = assemble_stiffness(mesh).tocsr()
    v = np.zeros(mesh.n_nodes)
    bd = np.asarray(mesh.boundary_dofs)
    v[bd] = boundary_values
    free = np.setdiff1d(np.arange(mesh.n_nodes), bd)
    rhs = -K[free][:, bd] @ v[bd]
    v[free] = spla.spsolve(K[free][:, free].tocsc(), rhs)
    return v


class MinimalityWitness(NamedTuple):
    t: float
    energy: float
    competitor_energy: float
    max_jump: float
    witnessed: bool


def non_global_minimality(traj: DiscreteEvolution, mesh: FractureMesh, params: FractureParams,
                          load, t: float, jump_tol: float = JUMP_TOL) -> MinimalityWitness:
    """Compare the state at ``t`` with the broken competitor on the same data.

    ``witnessed`` is true when the trajectory is still unbroken at ``t`` yet the
    competitor has strictly lower energy.
    """
    v = traj.state_at(t)
    t_grid = float(traj.times[traj.index_at(t)])
    comp = broken_competitor(mesh, params, load(t_grid))
    e = fracture_energy(v, mesh, params)[0]
    ec = fracture_energy(comp, mesh, params)[0]
    mj = float(np.max(np.abs(mesh.jumps(v)), initial=0.0))
    return MinimalityWitness(t_grid, e, ec, mj, bool(mj < jump_tol and ec < e))


def refinement_study(config, levels: int, mode: str = "both", probe_t: float = 0.75,
                     jump_tol: float = JUMP_TOL) -> list[dict]:
    """Repeat a run with ``N * 2^k`` and/or ``delta / 2^k`` for ``k < levels``.

    Each row reports the initiation time, final energies and, in 1D, the
    interface slope at ``probe_t`` with its error against the analytic
    evolution.  ``energy_sup_diff`` is the largest difference of the total
    energy to the previous level over the coarser grid times.
    """
    from .io import simulate

    if levels < 2:
        raise ValueError("levels must be at least 2")
    if mode not in ("both", "h", "delta"):
        raise ValueError("mode must be 'both', 'h' or 'delta'")
    rows, prev = [], None
    for k in range(levels):
        f = 2 ** k
        cfg = config.replace(
            N=config.N * (f if mode in ("both", "h") else 1),
            delta=config.delta / (f if mode in ("both", "delta") else 1),
        )
        prob, traj = simulate(cfg)
        curves = energy_curves(traj, prob.mesh, prob.params)
        row = dict(level=k, N=cfg.N, h=prob.mesh.h, delta=cfg.delta,
                   initiation_time=crack_initiation_time(traj, prob.mesh, jump_tol),
                   final_elastic=float(curves[-1, 0]), final_crack=float(curves[-1, 1]),
                   final_total=float(curves[-1, 2]))
        if cfg.dim == 1 and probe_t <= traj.times[-1]:
            slope = interface_slope(traj.state_at(probe_t), prob.mesh)
            ref = analytic_1d_oracle(probe_t, cfg.ell, cfg.R, cfg.kappa).slope
            row.update(probe_t=probe_t, slope=slope, slope_error=abs(slope - ref))
        if prev is not None:
            p_traj, p_curves = prev
            diffs = [abs(curves[traj.index_at(t), 2] - p_curves[i, 2])
                     for i, t in enumerate(p_traj.times)]
            row["energy_sup_diff"] = float(max(diffs))
        rows.append(row)
        prev = (traj, curves)
    return rows

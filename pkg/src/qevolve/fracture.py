"""Discrete cohesive-fracture model in antiplane shear.

The body is ``(0, 2l)`` (1D) or ``(0, 2l)^2`` (2D) with the crack path at
``x1 = l``.  P1 elements are built on each side separately, so the nodes on
the interface are duplicated; the jump of a state is the difference between
the right and left copies.  Displacements are imposed on ``x1 = 0`` and
``x1 = 2l``.

Energy::

    E_h(u) = 1/2 int |grad u|^2  +  kappa * sum_e w_e g(|[u]_e|)

with ``g(s) = s - s^2/(2R)`` for ``s < R`` and ``R/2`` beyond.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import scipy.sparse as sp

from .core import AffineConstraint, Dissipation, EnergyModel, LoadPath
from .exceptions import MeshError


def g_eval(s: float, R: float) -> tuple[float, float]:
    """Cohesive density and its derivative at an opening ``s >= 0``."""
    if s < 0:
        raise ValueError("opening must be nonnegative")
    if R <= 0:
        raise ValueError("R must be positive")
    if s < R:
        return s - s * s / (2.0 * R), 1.0 - s / R
    return R / 2.0, 0.0


def g_values(s: np.ndarray, R: float) -> np.ndarray:
    a = np.abs(s)
    return np.where(a < R, a - a * a / (2.0 * R), R / 2.0)


def cohesive_remainder(s: np.ndarray, R: float) -> tuple[np.ndarray, np.ndarray]:
    """``h(s) = g(|s|) - |s|`` and ``h'(s)``; C^{1,1} with ``|h''| <= 1/R``."""
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < R
    val = np.where(inside, -s * s / (2.0 * R), R / 2.0 - np.abs(s))
    der = np.where(inside, -s / R, -np.sign(s))
    return val, der


def default_eta(R: float, ell: float) -> float:
    return 1.0 / (2.0 * R) + max(4.0, 4.0 * np.sqrt(ell))


@dataclass(frozen=True)
class FractureParams:
    R: float
    kappa: float = 1.0
    eta: Optional[float] = None

    def __post_init__(self):
        if self.R <= 0 or self.kappa <= 0:
            raise ValueError("R and kappa must be positive")
        if self.eta is not None and self.eta < 1.0 / (2.0 * self.R):
            raise ValueError("eta must be at least 1/(2R)")

    def eta_for(self, ell: float) -> float:
        return default_eta(self.R, ell) if self.eta is None else float(self.eta)


@dataclass
class FractureMesh:
    dim: int
    ell: float
    N: int
    h: float
    nodes: np.ndarray          # (n, dim)
    elements: np.ndarray       # (k, dim + 1)
    jump_pairs: np.ndarray     # (p, 2): left id, right id
    jump_weights: np.ndarray   # (p,)
    boundary_dofs: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def jumps(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        return v[self.jump_pairs[:, 1]] - v[self.jump_pairs[:, 0]]

    def to_json(self) -> str:
        return json.dumps({
            "dim": self.dim, "ell": self.ell, "N": self.N, "h": self.h,
            "nodes": self.nodes.tolist(),
            "elements": self.elements.tolist(),
            "jump_pairs": [[int(a), int(b), float(w)]
                           for (a, b), w in zip(self.jump_pairs, self.jump_weights)],
            "boundary_dofs": self.boundary_dofs.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "FractureMesh":
        d = json.loads(text)
        jp = np.asarray(d["jump_pairs"], dtype=float).reshape(-1, 3)
        return cls(d["dim"], d["ell"], d["N"], d["h"],
                   np.asarray(d["nodes"], dtype=float).reshape(-1, d["dim"]),
                   np.asarray(d["elements"], dtype=int),
                   jp[:, :2].astype(int), jp[:, 2],
                   np.asarray(d["boundary_dofs"], dtype=int))


def build_mesh(dim: int, ell: float, N: int) -> FractureMesh:
    """Uniform mesh of the cracked body with step ``h = ell / N``.

    In 2D each square is split by a diagonal; the left half uses the
    ``/`` diagonal and the right half its mirror image, so the mesh is
    symmetric about the interface.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    if ell <= 0:
        raise ValueError("ell must be positive")
    h = ell / N
    if dim == 1:
        left = h * np.arange(N + 1)
        nodes = np.concatenate([left, ell + left])[:, None]
        elements = [(i, i + 1) for i in range(N)] + [(N + 1 + i, N + 2 + i) for i in range(N)]
        return FractureMesh(1, ell, N, h, nodes, np.asarray(elements, dtype=int),
                            np.array([[N, N + 1]]), np.array([1.0]),
                            np.array([0, 2 * N + 1]))
    if dim != 2:
        raise ValueError("dim must be 1 or 2")
    ny = 2 * N + 1

    def nid(i, j):
        # column i in 0..2N; the interface column N belongs to the left block
        return i * ny + j

    def nid_right(i, j):
        return (N + 1) * ny + (i - N) * ny + j

    coords = []
    for i in range(N + 1):
        for j in range(ny):
            coords.append((i * h, j * h))
    for i in range(N, 2 * N + 1):
        for j in range(ny):
            coords.append((i * h, j * h))
    nodes = np.asarray(coords)
    elements = []
    for i in range(2 * N):
        ids = nid if i < N else nid_right
        for j in range(2 * N):
            a, b, c, d = ids(i, j), ids(i + 1, j), ids(i, j + 1), ids(i + 1, j + 1)
            if i < N:
                elements += [(a, b, d), (a, d, c)]
            else:
                elements += [(a, b, c), (b, d, c)]
    elements = np.asarray(elements, dtype=int)
    pairs = np.array([[nid(N, j), nid_right(N, j)] for j in range(ny)])
    weights = np.full(ny, h)
    weights[[0, -1]] = h / 2.0
    boundary = np.array([nid(0, j) for j in range(ny)] + [nid_right(2 * N, j) for j in range(ny)])
    return FractureMesh(2, ell, N, h, nodes, elements, pairs, weights, boundary)


def _element_geometry(mesh: FractureMesh):
    """Per-element measure and gradients of the local basis functions."""
    X = mesh.nodes[mesh.elements]                      # (k, d+1, d)
    if mesh.dim == 1:
        length = X[:, 1, 0] - X[:, 0, 0]
        if np.any(np.abs(length) <= 0):
            raise MeshError("degenerate element")
        grads = np.stack([-1.0 / length, 1.0 / length], axis=1)[:, None, :]  # (k, 1, 2)
        return np.abs(length), grads
    E1 = X[:, 1] - X[:, 0]
    E2 = X[:, 2] - X[:, 0]
    det = E1[:, 0] * E2[:, 1] - E1[:, 1] * E2[:, 0]
    if np.any(np.abs(det) <= 1e-14 * mesh.h ** 2):
        raise MeshError("degenerate element")
    inv = np.empty((len(det), 2, 2))
    inv[:, 0, 0] = E2[:, 1] / det
    inv[:, 0, 1] = -E2[:, 0] / det
    inv[:, 1, 0] = -E1[:, 1] / det
    inv[:, 1, 1] = E1[:, 0] / det
    ref = np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])   # reference gradients
    grads = np.einsum("kij,il->kjl", inv, ref)             # (k, 2, 3)
    return 0.5 * np.abs(det), grads


def assemble_stiffness(mesh: FractureMesh) -> sp.csr_matrix:
    """P1 stiffness ``K`` with ``0.5 v'Kv = 1/2 int |grad v|^2`` on the cracked body."""
    meas, grads = _element_geometry(mesh)
    local = meas[:, None, None] * np.einsum("kdi,kdj->kij", grads, grads)
    return _scatter(mesh, local)


def assemble_mass(mesh: FractureMesh) -> sp.csr_matrix:
    meas, _ = _element_geometry(mesh)
    if mesh.dim == 1:
        ref = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    else:
        ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _scatter(mesh, meas[:, None, None] * ref[None])


def _scatter(mesh: FractureMesh, local: np.ndarray) -> sp.csr_matrix:
    el = mesh.elements
    k = el.shape[1]
    rows = np.repeat(el, k, axis=1).ravel()
    cols = np.tile(el, (1, k)).ravel()
    n = mesh.n_nodes
    M = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    M.sum_duplicates()
    return M


def jump_operator(mesh: FractureMesh) -> sp.csr_matrix:
    p = len(mesh.jump_pairs)
    r = np.repeat(np.arange(p), 2)
    c = mesh.jump_pairs.ravel()
    vals = np.tile([-1.0, 1.0], p)
    return sp.csr_matrix((vals, (r, c)), shape=(p, mesh.n_nodes))


class _ElasticEvaluator:
    """Sum of positive per-element terms, free of the cancellation in v'Kv."""

    def __init__(self, mesh: FractureMesh):
        self.meas, self.grads = _element_geometry(mesh)
        self.elements = mesh.elements

    def __call__(self, v: np.ndarray) -> float:
        ge = np.einsum("kdi,ki->kd", self.grads, v[self.elements])
        return 0.5 * float(np.sum(self.meas * np.sum(ge * ge, axis=1)))


def fracture_energy(v, mesh: FractureMesh, params: FractureParams):
    """``(total, elastic, crack)``; ``kappa`` scales the crack term."""
    v = np.asarray(v, dtype=float)
    if v.shape != (mesh.n_nodes,):
        raise ValueError(f"state has shape {v.shape}, mesh has {mesh.n_nodes} nodes")
    elastic = _ElasticEvaluator(mesh)(v)
    crack = params.kappa * float(mesh.jump_weights @ g_values(mesh.jumps(v), params.R))
    return elastic + crack, elastic, crack


_LOAD_ALIASES = {
    "w1": "w1", "ω1": "w1", "omega1": "w1",
    "w2": "w2", "ω2": "w2", "omega2": "w2",
    "w1d": "w1d", "ω1d": "w1d", "omega1d": "w1d",
}


def load_kind(kind: str) -> str:
    try:
        return _LOAD_ALIASES[kind]
    except KeyError:
        raise ValueError(f"unknown load kind {kind!r}") from None


def load_field(kind: str, t: float, mesh: FractureMesh) -> np.ndarray:
    """Imposed displacement field at every node (continuous across the interface)."""
    kind = load_kind(kind)
    ell = mesh.ell
    x1 = mesh.nodes[:, 0]
    if kind == "w1d":
        if mesh.dim != 1:
            raise ValueError("load w1d needs a 1D mesh")
        return 2.0 * (x1 - ell) * t
    if mesh.dim != 2:
        raise ValueError(f"load {kind} needs a 2D mesh")
    if kind == "w1":
        return 2.0 * (x1 - ell) * t
    x2 = mesh.nodes[:, 1]
    return 2.0 * t * np.cos(2.0 * (x2 - ell) / ell) * (x1 - ell)


def boundary_load(kind: str, t: float, mesh: FractureMesh):
    """Boundary values and their time derivative on ``mesh.boundary_dofs``.

    All loads are linear in ``t``, so the rate is the field at ``t = 1``.
    """
    rate = load_field(kind, 1.0, mesh)[mesh.boundary_dofs]
    return t * rate, rate


class Oracle1D(NamedTuple):
    phase: str
    slope: float
    jump: float
    energy: float


def analytic_1d_oracle(t: float, ell: float, R: float, kappa: float = 1.0) -> Oracle1D:
    """Critical-point evolution of the 1D bar under ``u(0) = -2lt``, ``u(2l) = 2lt``.

    The bar stays elastic (slope ``2t``) until the stress reaches ``kappa``.
    If ``R > 2 l kappa`` a cohesive branch follows, with equal slopes ``m`` on
    both sides solving ``m = kappa g'(s)`` and ``s = 4lt - 2lm``; otherwise the
    bar breaks at once.  Fully broken states carry no stress.
    """
    if min(ell, R, kappa) <= 0 or t < 0:
        raise ValueError("parameters must be positive and t nonnegative")
    t_init = kappa / 2.0
    if t <= t_init:
        m = 2.0 * t
        return Oracle1D("elastic", m, 0.0, 4.0 * ell * t * t)
    denom = R - 2.0 * ell * kappa
    if denom == 0.0:
        raise ValueError("R = 2 l kappa: cohesive branch degenerate")
    t_break = R / (4.0 * ell)
    if denom > 0 and t < t_break:
        m = kappa * (R - 4.0 * ell * t) / denom
        s = 4.0 * ell * t - 2.0 * ell * m
        return Oracle1D("cohesive", m, s, ell * m * m + kappa * g_eval(s, R)[0])
    return Oracle1D("broken", 0.0, 4.0 * ell * t, kappa * R / 2.0)


@dataclass
class FractureProblem:
    """Everything the evolution engine needs for one fracture experiment."""

    mesh: FractureMesh
    params: FractureParams
    load_kind: str
    K: sp.csr_matrix
    mass: sp.csr_matrix
    model: EnergyModel
    constraint: AffineConstraint
    load: LoadPath
    psi: Dissipation

    def energy_parts(self, v):
        return fracture_energy(v, self.mesh, self.params)

    def near_kink(self, v: np.ndarray, margin: float) -> np.ndarray:
        """DOFs touching an interface pair with ``||jump| - R| < margin``."""
        s = self.mesh.jumps(v)
        close = np.abs(np.abs(s) - self.params.R) < margin
        mask = np.zeros(self.mesh.n_nodes, dtype=bool)
        mask[self.mesh.jump_pairs[close].ravel()] = True
        return mask


def fracture_model(mesh: FractureMesh, params: FractureParams,
                   K: Optional[sp.csr_matrix] = None,
                   mass: Optional[sp.csr_matrix] = None) -> EnergyModel:
    """Energy model of ``E_h`` with the H^1 Gram matrix as the state metric."""
    K = assemble_stiffness(mesh) if K is None else K
    mass = assemble_mass(mesh) if mass is None else mass
    w = params.kappa * mesh.jump_weights
    R = params.R
    elastic = _ElasticEvaluator(mesh)

    def row_smooth(s):
        val, der = cohesive_remainder(s, R)
        return w * val, w * der

    def energy(v):
        return elastic(v) + params.kappa * float(mesh.jump_weights @ g_values(mesh.jumps(v), R))

    return EnergyModel(
        dim=mesh.n_nodes,
        eta=params.eta_for(mesh.ell),
        quadratic=K,
        rows=jump_operator(mesh),
        weights=w,
        row_smooth=row_smooth,
        row_curvature=w / R,
        metric=(mass + K).tocsr(),
        energy_fn=energy,
    )


def build_problem(dim: int, ell: float, N: int, params: FractureParams, kind: str,
                  T: float = 1.0) -> FractureProblem:
    mesh = build_mesh(dim, ell, N)
    K = assemble_stiffness(mesh)
    mass = assemble_mass(mesh)
    model = fracture_model(mesh, params, K, mass)
    constraint = AffineConstraint(mesh.boundary_dofs, mesh.n_nodes)
    _, rate = boundary_load(kind, 1.0, mesh)
    load = LoadPath.linear(rate, T)
    return FractureProblem(mesh, params, load_kind(kind), K, mass, model, constraint, load,
                           Dissipation.off(mesh.n_nodes))


def interface_slope(v: np.ndarray, mesh: FractureMesh) -> float:
    """Slope of a 1D state on the last element left of the interface."""
    if mesh.dim != 1:
        raise ValueError("interface slope is defined for 1D meshes")
    left = mesh.jump_pairs[0, 0]
    return float((v[left] - v[left - 1]) / mesh.h)

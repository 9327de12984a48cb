"""Run configurations, experiment runner and output writers."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    DiscreteEvolution,
    check_energy_inequality,
    discrete_evolution,
    estimate_slack_coeff,
)
from .diagnostics import JUMP_TOL, energy_curves, stationarity_residual
from .exceptions import ConfigError, ConvergenceError
from .fracture import FractureMesh, FractureParams, build_problem, load_kind

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["step", "t", "elastic", "crack", "total", "psi_variation_cum",
               "virtual_power_cum", "inner_iters"]


@dataclass(frozen=True)
class RunConfig:
    """One fracture experiment.

    ``tol_inner`` defaults to ``1e-13`` in 1D and ``5e-14`` in 2D; ``eta_override``
    replaces the default convexification parameter.
    """

    dim: int
    ell: float
    N: int
    R: float
    kappa: float
    load: str
    T: float
    delta: float
    eta_override: Optional[float] = None
    tol_inner: Optional[float] = None
    tol_feas: float = 1e-6
    alpha: int = 0
    psi_weights: Optional[object] = None
    out: Optional[str] = None
    seed: int = 0
    snapshot_every: int = 1

    def __post_init__(self):
        if self.tol_inner is None:
            object.__setattr__(self, "tol_inner", 1e-13 if self.dim == 1 else 5e-14)
        _validate(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def params(self) -> FractureParams:
        return FractureParams(self.R, self.kappa, self.eta_override)


_REQUIRED = ("dim", "ell", "N", "R", "kappa", "load", "T", "delta")
_INT_KEYS = {"dim", "N", "alpha", "seed", "snapshot_every"}
_FLOAT_KEYS = {"ell", "R", "kappa", "T", "delta", "eta_override", "tol_inner", "tol_feas"}
_STR_KEYS = {"load", "out"}


def _validate(cfg: RunConfig) -> None:
    if cfg.dim not in (1, 2):
        raise ConfigError("dim must be 1 or 2")
    if cfg.N < 1:
        raise ConfigError("N must be at least 1")
    if not 0.0 < cfg.delta < 1.0:
        raise ConfigError("delta out of (0,1)")
    for key in ("ell", "R", "kappa", "tol_inner", "tol_feas"):
        if not getattr(cfg, key) > 0:
            raise ConfigError(f"{key} must be positive")
    if cfg.T < 0:
        raise ConfigError("T must be nonnegative")
    if cfg.eta_override is not None and cfg.eta_override < 1.0 / (2.0 * cfg.R):
        raise ConfigError("eta_override must be at least 1/(2R)")
    try:
        kind = load_kind(cfg.load)
    except ValueError as exc:
        raise ConfigError(f"load: {exc}") from None
    if (kind == "w1d") != (cfg.dim == 1):
        raise ConfigError(f"load {cfg.load!r} does not match dim {cfg.dim}")
    if cfg.alpha not in (0, 1):
        raise ConfigError("alpha must be 0 or 1")
    if cfg.alpha == 1:
        # identity rows of psi overlap the jump rows, so the prox is no longer separable
        raise ConfigError("alpha = 1 is not supported for the fracture model; "
                          "use the generic engine for dissipative runs")
    if cfg.snapshot_every < 0:
        raise ConfigError("snapshot_every must be nonnegative")


def parse_config(text: str) -> RunConfig:
    """Parse a JSON run configuration; unknown keys and bad types are errors."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
    for key in _REQUIRED:
        if key not in data:
            raise ConfigError(f"missing required key {key!r}")
    clean = {}
    for key, val in data.items():
        if val is None and key not in _REQUIRED:
            continue
        if key in _INT_KEYS:
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"key {key!r} must be an integer")
        elif key in _FLOAT_KEYS:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"key {key!r} must be a number")
            val = float(val)
        elif key in _STR_KEYS:
            if not isinstance(val, str):
                raise ConfigError(f"key {key!r} must be a string")
        elif key == "psi_weights":
            if not isinstance(val, (int, float, list)) or isinstance(val, bool):
                raise ConfigError("key 'psi_weights' must be a number or a list")
        clean[key] = val
    return RunConfig(**clean)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def simulate(cfg: RunConfig):
    """Build the problem for ``cfg`` and run the evolution from rest."""
    prob = build_problem(cfg.dim, cfg.ell, cfg.N, cfg.params, cfg.load, cfg.T)
    traj = discrete_evolution(prob.model, prob.psi, prob.constraint, prob.load,
                              np.zeros(prob.mesh.n_nodes), cfg.delta,
                              tol_inner=cfg.tol_inner, tol_feas=cfg.tol_feas, T=cfg.T,
                              seed=cfg.seed)
    return prob, traj


# ----------------------------------------------------------------- writers

def write_energies_csv(path, traj: DiscreteEvolution, curves: np.ndarray) -> None:
    psi_cum = np.cumsum([row["psi_increment"] for row in traj.ledger])
    vp_cum = np.cumsum([row["virtual_power"] for row in traj.ledger])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i, row in enumerate(traj.ledger):
            vals = [row["t"], *curves[i], psi_cum[i], vp_cum[i]]
            w.writerow([str(row["step"])] + ["%.17g" % x for x in vals]
                       + [str(row["inner_iters"])])


def read_energies_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in CSV_COLUMNS}


def _color(x: float) -> str:
    """Blue-white-red ramp for ``x`` in [-1, 1]."""
    x = float(np.clip(x, -1.0, 1.0))
    if x < 0:
        c = (int(255 * (1 + x)), int(255 * (1 + x)), 255)
    else:
        c = (255, int(255 * (1 - x)), int(255 * (1 - x)))
    return "#%02x%02x%02x" % c


def snapshot_svg(v: np.ndarray, mesh: FractureMesh, t: float, size: int = 320) -> str:
    """Static picture of a state: displacement graph (1D) or nodal colors (2D)."""
    pad = 20
    L = 2.0 * mesh.ell
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 2 * pad}" '
           f'height="{size + 2 * pad}" viewBox="0 0 {size + 2 * pad} {size + 2 * pad}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<text x="{pad}" y="14" font-size="12" font-family="sans-serif">t = {t:.4g}</text>']
    X = lambda x: pad + size * x / L  # noqa: E731
    if mesh.dim == 1:
        vmax = max(float(np.max(np.abs(v))), 1e-12)
        Y = lambda y: pad + size * (0.5 - 0.45 * y / vmax)  # noqa: E731
        n = mesh.N + 1
        for side in (slice(0, n), slice(n, 2 * n)):
            pts = " ".join(f"{X(x):.3f},{Y(y):.3f}"
                           for x, y in zip(mesh.nodes[side, 0], v[side]))
            out.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="2"/>')
        out.append(f'<line x1="{X(mesh.ell):.3f}" y1="{pad}" x2="{X(mesh.ell):.3f}" '
                   f'y2="{pad + size}" stroke="red" stroke-dasharray="4,3"/>')
    else:
        vmax = max(float(np.max(np.abs(v))), 1e-12)
        Y = lambda y: pad + size * (1.0 - y / L)  # noqa: E731
        for tri in mesh.elements:
            pts = " ".join(f"{X(mesh.nodes[k, 0]):.3f},{Y(mesh.nodes[k, 1]):.3f}" for k in tri)
            col = _color(float(np.mean(v[tri])) / vmax)
            out.append(f'<polygon points="{pts}" fill="{col}" stroke="#888" stroke-width="0.5"/>')
        for k, (x, y) in enumerate(mesh.nodes):
            shift = 3.0 if k in set(mesh.jump_pairs[:, 1]) else 0.0
            out.append(f'<circle cx="{X(x) + shift:.3f}" cy="{Y(y):.3f}" r="3" '
                       f'fill="{_color(v[k] / vmax)}" stroke="black" stroke-width="0.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def stationarity_reports(traj: DiscreteEvolution, prob, jump_tol: float = JUMP_TOL) -> dict:
    steps = []
    for i, v in enumerate(traj.states):
        rep = stationarity_residual(v, prob.mesh, prob.params, jump_tol, K=prob.K)
        d = rep.to_dict()
        d.update(step=i, t=float(traj.times[i]),
                 tolerance=1e-6 * (1.0 + float(np.linalg.norm(v))))
        steps.append(d)
    worst = max((s["max_residual"] / s["tolerance"] for s in steps), default=0.0)
    return {"jump_tol": jump_tol, "steps": steps, "worst_relative": worst,
            "passed": bool(worst <= 1.0)}


def _write_outputs(out: Path, cfg: RunConfig, prob, traj: DiscreteEvolution) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    snaps = out / "snapshots"
    snaps.mkdir(exist_ok=True)
    curves = energy_curves(traj, prob.mesh, prob.params)
    files = []
    write_energies_csv(out / "energies.csv", traj, curves)
    files.append("energies.csv")
    doc = {"config": cfg.to_dict(), "mesh": json.loads(prob.mesh.to_json()), **traj.to_dict()}
    (out / "trajectory.json").write_text(json.dumps(doc))
    files.append("trajectory.json")
    (out / "stationarity.json").write_text(json.dumps(stationarity_reports(traj, prob), indent=1))
    files.append("stationarity.json")
    if cfg.snapshot_every:
        for i in range(0, len(traj), cfg.snapshot_every):
            name = f"snapshots/step_{i}.svg"
            (out / name).write_text(snapshot_svg(traj.states[i], prob.mesh, traj.times[i]))
            files.append(name)
    return {name: _sha256(out / name) for name in files}


def run_experiment(cfg: RunConfig, out=None) -> dict:
    """Run ``cfg`` and write all artifacts; returns the manifest.

    The manifest (also written as ``manifest.json``) maps each file to its
    SHA-256.  If the evolution fails to converge, the partial trajectory is
    written with ``status = "partial"`` before the error is re-raised.
    """
    out = Path(out or cfg.out or "run_output")
    prob = build_problem(cfg.dim, cfg.ell, cfg.N, cfg.params, cfg.load, cfg.T)
    status, note, err = "complete", None, None
    try:
        traj = discrete_evolution(prob.model, prob.psi, prob.constraint, prob.load,
                                  np.zeros(prob.mesh.n_nodes), cfg.delta,
                                  tol_inner=cfg.tol_inner, tol_feas=cfg.tol_feas, T=cfg.T,
                                  seed=cfg.seed)
    except ConvergenceError as exc:
        if exc.partial is None:
            raise
        traj, status, note, err = exc.partial, "partial", str(exc), exc
    checks = _write_outputs(out, cfg, prob, traj)
    manifest = {"status": status, "files": checks}
    if note:
        manifest["note"] = note
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    logger.info("wrote %d files to %s", len(checks), out)
    if err is not None:
        raise err
    return manifest


def verify_manifest(out) -> bool:
    out = Path(out)
    manifest = json.loads((out / "manifest.json").read_text())
    return all(_sha256(out / name) == digest for name, digest in manifest["files"].items())


def load_trajectory(path):
    """Read a ``trajectory.json``; returns ``(config, mesh, trajectory)``."""
    doc = json.loads(Path(path).read_text())
    cfg = RunConfig(**doc["config"])
    mesh = FractureMesh.from_json(json.dumps(doc["mesh"]))
    return cfg, mesh, DiscreteEvolution.from_dict(doc)


def check_trajectory(path, jump_tol: float = JUMP_TOL) -> dict:
    """Re-verify a saved run: feasibility, stationarity and the energy inequality."""
    cfg, _, traj = load_trajectory(path)
    prob = build_problem(cfg.dim, cfg.ell, cfg.N, cfg.params, cfg.load, cfg.T)
    feas = max(float(np.linalg.norm(prob.constraint.apply(v) - prob.load(t)))
               for t, v in zip(traj.times, traj.states))
    stat = stationarity_reports(traj, prob, jump_tol)
    energies = energy_curves(traj, prob.mesh, prob.params)[:, 2]
    ineq = check_energy_inequality(traj, prob.load, estimate_slack_coeff(traj, prob.load),
                                   energies=energies)
    result = {
        "steps": len(traj),
        "max_feas_error": feas,
        "feasible": bool(feas < cfg.tol_feas),
        "stationarity_worst_relative": stat["worst_relative"],
        "stationary": stat["passed"],
        "energy_inequality_max_gap": ineq.max_gap,
        "energy_inequality_slack": ineq.slack,
        "energy_inequality": ineq.passed,
    }
    result["passed"] = result["feasible"] and result["stationary"] and result["energy_inequality"]
    return result


def configure_logging() -> None:
    level = os.environ.get("QEVOLVE_LOG", "WARNING").upper()
    if level.isdigit():
        lvl = int(level)
    else:
        lvl = getattr(logging, level, None)
        if not isinstance(lvl, int):
            lvl = logging.WARNING
    logging.basicConfig(level=lvl, format="%(levelname)s %(name)s: %(message)s")

"""Independent reference computations used by the tests.

Nothing here calls into the package's solvers; the oracles are brute-force
searches or dense linear algebra.
"""

from __future__ import annotations

import numpy as np


def grid_argmin(f, center, half_width, step=1e-3, final_step=1e-6):
    """Exhaustive search on a box followed by zoomed searches.

    The first pass scans ``center +- half_width`` with spacing ``step`` (made
    coarser if the grid would exceed a few million points); each later pass scans
    two old cells around the incumbent at ten times finer spacing, re-centred
    until the incumbent stays put, down to ``final_step``.  Meant for strongly convex functions of at most three
    variables.
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))
    d = len(center)
    n0 = int(round(2 * half_width / step)) + 1
    if n0 ** d > 3_000_000:
        n0 = int(round(3_000_000 ** (1.0 / d)))
        step = 2 * half_width / (n0 - 1)
    best = _scan(f, [np.linspace(c - half_width, c + half_width, n0) for c in center])
    h = step
    while h > final_step:
        span = int(np.ceil(2 * h / max(h / 10.0, final_step)))
        h = max(h / 10.0, final_step)
        # re-centre until the incumbent is interior, so valleys along kinks
        # that are oblique to the axes are followed
        for _ in range(1000):
            new = _scan(f, [b + h * np.arange(-span, span + 1) for b in best])
            moved = np.any(np.abs(new - best) > 0.5 * h)
            best = new
            if not moved:
                break
    return best


def _scan(f, axes):
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    vals = np.array([f(p) for p in pts]) if len(pts) < 2000 else _vectorized(f, pts)
    return pts[int(np.argmin(vals))].copy()


def _vectorized(f, pts):
    try:
        vals = f(pts)
        if np.shape(vals) == (len(pts),):
            return np.asarray(vals)
    except Exception:  # noqa: BLE001 - fall back to pointwise evaluation
        pass
    return np.array([f(p) for p in pts])


def prox_grid(x, lam, lo=-4.0, hi=4.0, step=1e-4):
    """Minimizer of ``lam |y| + (y - x)^2 / 2`` by grid search plus zooming."""
    f = lambda y: lam * np.abs(y) + 0.5 * (y - x) ** 2  # noqa: E731
    ys = np.arange(lo, hi + step / 2, step)
    y0 = ys[int(np.argmin(f(ys)))]
    fine = y0 + np.linspace(-step, step, 2001)
    return float(fine[int(np.argmin(f(fine)))])


def dense_max_eig(K):
    A = K.toarray() if hasattr(K, "toarray") else np.asarray(K)
    return float(np.linalg.eigvalsh(0.5 * (A + A.T))[-1])


def bar_energy(m_left, m_right, t, ell, R, kappa):
    """Energy of the 1D bar with side slopes ``m_left``, ``m_right``.

    Ends are pinned at ``-2 ell t`` and ``2 ell t``; each side is affine, so the
    interface jump is ``4 ell t - ell (m_left + m_right)``.
    """
    s = 4.0 * ell * t - ell * (m_left + m_right)
    a = np.abs(s)
    g = np.where(a < R, a - a * a / (2.0 * R), R / 2.0)
    return 0.5 * ell * (m_left ** 2 + m_right ** 2) + kappa * g


def bar_min(t, ell, R, kappa):
    """Global minimizer of :func:`bar_energy` over both slopes."""
    f = lambda p: bar_energy(p[..., 0], p[..., 1], t, ell, R, kappa)  # noqa: E731
    return grid_argmin(f, np.zeros(2), 4.0, step=1e-2)


def bar_stationarity_gap(m, t, ell, R, kappa, h=1e-7):
    """Distance of ``0`` from the one-sided derivative range at a symmetric state.

    Along the symmetric slope direction the energy is
    ``phi(m) = ell m^2 + kappa g(|4 ell t - 2 ell m|)``.  A critical point has
    ``phi'(m-) <= 0 <= phi'(m+)`` up to the discretization error.
    """
    phi = lambda mm: bar_energy(mm, mm, t, ell, R, kappa)  # noqa: E731
    right = (phi(m + h) - phi(m)) / h
    left = (phi(m) - phi(m - h)) / h
    return max(left, 0.0) + max(-right, 0.0)


def random_disjoint_rows(rng, n_free_ids, n_total):
    """Random rows over pairwise disjoint groups of the given free ids."""
    ids = list(rng.permutation(n_free_ids))
    rows = []
    while ids and rng.random() < 0.8:
        size = int(rng.integers(1, min(2, len(ids)) + 1))
        group, ids = ids[:size], ids[size:]
        a = np.zeros(n_total)
        a[group] = rng.uniform(0.5, 2.0, size) * rng.choice([-1, 1], size)
        rows.append(a)
    return np.array(rows).reshape(-1, n_total)


def kink_aligned_argmin(f, A, kinks, half_width, **kw):
    """:func:`grid_argmin` in coordinates where the nonsmooth rows are axes.

    ``A`` (m, k) holds linearly independent rows whose kinks sit at
    ``A x = kinks``.  The search runs over ``y = T x`` with ``T`` stacking ``A``
    and an orthonormal basis of its null space, and the row coordinates are
    centred on their kinks so that every grid contains them.
    """
    from scipy.linalg import null_space

    A = np.asarray(A, dtype=float)
    k = A.shape[1]
    T = np.vstack([A, null_space(A).T]) if A.shape[0] else np.eye(k)
    Tinv = np.linalg.inv(T)
    center = np.concatenate([np.asarray(kinks, dtype=float), np.zeros(k - A.shape[0])])
    g = lambda Y: f(np.atleast_2d(Y) @ Tinv.T)  # noqa: E731
    return Tinv @ grid_argmin(g, center, half_width, **kw)

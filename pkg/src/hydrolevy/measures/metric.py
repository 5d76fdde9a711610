"""Bounded-Lipschitz distance between empirical measures.

``d(mu, nu) = sup { |int phi d(mu - nu)| : |phi|_inf + Lip(phi) <= 1 }``.
On a finite support the sup is a linear program in the values ``phi(p)``
and one split variable ``s`` (the sup-norm budget):

    max  sum_p (mu_p - nu_p) phi_p
    s.t. -s <= phi_p <= s,   phi_p - phi_q <= (1 - s) |p - q|_H,   0 <= s <= 1.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.spatial.distance import cdist

from .empirical import EmpiricalMeasure

MAX_LP_SUPPORT = 500


class SupportTooLargeError(ValueError):
    pass


def joint_support(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    """Merged support and the signed weight ``mu - nu`` on it."""
    pts = np.vstack([mu.support, nu.support])
    signed = np.concatenate([mu.weights, -nu.weights])
    pts, inv = np.unique(pts, axis=0, return_inverse=True)
    diff = np.bincount(inv.reshape(-1), weights=signed, minlength=pts.shape[0])
    return pts, diff


def _canonical(mu, nu):
    # d(mu, nu) = d(nu, mu) via phi -> -phi; fixing the sign makes both orders solve the same problem
    pts, diff = joint_support(mu, nu)
    nz = np.flatnonzero(diff)
    if nz.size and diff[nz[0]] < 0:
        diff = -diff
    return pts, diff


def lp_arrays(points, diff):
    """``(c, A_ub, b_ub, bounds)`` of the minimisation form; variables ``(phi, s)``."""
    n = points.shape[0]
    D = cdist(points, points)
    rows, cols, vals, rhs = [], [], [], []
    r = 0
    for p in range(n):
        # phi_p - s <= 0 and -phi_p - s <= 0
        rows += [r, r, r + 1, r + 1]
        cols += [p, n, p, n]
        vals += [1.0, -1.0, -1.0, -1.0]
        rhs += [0.0, 0.0]
        r += 2
    iu, ju = np.nonzero(~np.eye(n, dtype=bool))
    m = iu.size
    ridx = r + np.arange(m)
    rows = np.concatenate([rows, ridx, ridx, ridx])
    cols = np.concatenate([cols, iu, ju, np.full(m, n)])
    vals = np.concatenate([vals, np.ones(m), -np.ones(m), D[iu, ju]])
    rhs = np.concatenate([rhs, D[iu, ju]])
    A = sp.csr_matrix((vals, (rows.astype(int), cols.astype(int))), shape=(r + m, n + 1))
    c = np.concatenate([-diff, [0.0]])
    bounds = [(None, None)] * n + [(0.0, 1.0)]
    return c, A, rhs, bounds


def _exact_lp(mu, nu):
    pts, diff = _canonical(mu, nu)
    n = pts.shape[0]
    if n > MAX_LP_SUPPORT:
        raise SupportTooLargeError(f"combined support {n} exceeds {MAX_LP_SUPPORT}")
    if n == 1 or not np.any(diff):
        return 0.0
    c, A, b, bounds = lp_arrays(pts, diff)
    res = linprog(c, A_ub=A, b_ub=b, bounds=bounds, method="highs-ds",
                  options=dict(primal_feasibility_tolerance=1e-10, dual_feasibility_tolerance=1e-10))
    if res.status != 0:
        raise RuntimeError(f"LP failed: {res.message}")
    return float(min(2.0, max(0.0, -res.fun)))


def _dual_estimate(mu, nu, n_functions=512, seed=0):
    pts, diff = _canonical(mu, nu)
    if pts.shape[0] == 1 or not np.any(diff):
        return 0.0
    rng = np.random.default_rng(seed)
    n, dim = pts.shape
    best = 0.0
    D = cdist(pts, pts) if n <= 2000 else None
    for _ in range(n_functions):
        s = rng.uniform(0.05, 0.95)
        if rng.random() < 0.5:
            # cone around a support point
            ci = rng.integers(n)
            dist = D[ci] if D is not None else np.sqrt(((pts - pts[ci]) ** 2).sum(axis=1))
            r = rng.uniform(0, dist.max() + 1e-12)
            phi = np.clip((1 - s) * (r - dist), -s, s)
        else:
            # ridge along a random direction or a difference of support points
            if rng.random() < 0.5 and n > 1:
                i, j = rng.choice(n, 2, replace=False)
                w = pts[i] - pts[j]
            else:
                w = rng.standard_normal(dim)
            nw = np.linalg.norm(w)
            if nw == 0:
                continue
            proj = pts @ (w / nw)
            off = rng.uniform(proj.min(), proj.max())
            phi = np.clip((1 - s) * (proj - off), -s, s)
        best = max(best, abs(float(diff @ phi)))
    return best


def dp_metric(mu: EmpiricalMeasure, nu: EmpiricalMeasure, method: str = "exact_lp", **kw) -> float:
    """Bounded-Lipschitz distance; ``dual_estimate`` is a lower bound."""
    if mu.dim != nu.dim:
        raise ValueError("measures live in different dimensions")
    if method == "exact_lp":
        return _exact_lp(mu, nu)
    if method == "dual_estimate":
        return _dual_estimate(mu, nu, **kw)
    raise ValueError(f"unknown method {method!r}")


def dump_lp(mu: EmpiricalMeasure, nu: EmpiricalMeasure, path) -> None:
    """Write the LP in a plain-text form: ``minimize`` row, ``<=`` rows, bounds.

    Each constraint line is ``c i:a_i j:a_j ... <= b`` with zero-based
    variable indices; the last variable is the split ``s``.
    """
    pts, diff = joint_support(mu, nu)
    c, A, b, bounds = lp_arrays(pts, diff)
    A = A.tocsr()
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# bounded-Lipschitz LP, {pts.shape[0]} points, {A.shape[1]} variables\n")
        fh.write("minimize " + " ".join(f"{i}:{v:.17g}" for i, v in enumerate(c) if v != 0) + "\n")
        for r in range(A.shape[0]):
            lo, hi = A.indptr[r], A.indptr[r + 1]
            terms = " ".join(f"{j}:{v:.17g}" for j, v in zip(A.indices[lo:hi], A.data[lo:hi]))
            fh.write(f"c {terms} <= {b[r]:.17g}\n")
        for i, (lo, hi) in enumerate(bounds):
            fh.write(f"bound {i} {'-inf' if lo is None else repr(lo)} {'inf' if hi is None else repr(hi)}\n")

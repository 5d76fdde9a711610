"""Finite-dimensional Galerkin representation of the triple V < H < V'.

States are plain float64 numpy arrays.  A single state has shape ``(dim,)``;
every norm and map here also accepts a batch of shape ``(..., dim)`` and acts
on the last axis, which is how the ensemble solver uses them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """State length does not match the Galerkin space."""


@dataclass(frozen=True)
class GalerkinSpace:
    """Diagonal positive operator A on ``dim`` real coefficients.

    ``eigenvalues[i]`` is the eigenvalue of A on coefficient ``i``; the
    smallest one is the Poincare constant ``lambda_1``.  ``mode_labels`` are
    opaque, e.g. ``("shell", 3, "re")`` or ``("k", (1, 2), "cos")``.
    """

    eigenvalues: np.ndarray
    mode_labels: tuple = field(default=())

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        if lam.ndim != 1 or lam.size == 0:
            raise ValueError("eigenvalues must be a non-empty vector")
        if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            raise ValueError("eigenvalues must be finite and strictly positive")
        if np.any(np.diff(lam) < 0):
            raise ValueError("eigenvalues must be non-decreasing")
        lam = lam.copy()
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)
        if self.mode_labels and len(self.mode_labels) != lam.size:
            raise ValueError("one label per coefficient required")

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues[0])

    def zeros(self, *batch: int) -> np.ndarray:
        return np.zeros((*batch, self.dim))

    def check(self, u) -> np.ndarray:
        """Return ``u`` as a float array after validating its length and finiteness."""
        u = np.asarray(u, dtype=float)
        if u.shape[-1:] != (self.dim,):
            raise DimensionError(f"expected last axis {self.dim}, got shape {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("state has non-finite entries")
        return u


def _last_axis(space: GalerkinSpace, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[-1:] != (space.dim,):
        raise DimensionError(f"expected last axis {space.dim}, got shape {u.shape}")
    return u


def h_norm_sq(space: GalerkinSpace, u):
    u = _last_axis(space, u)
    return np.einsum("...i,...i->...", u, u)


def v_norm_sq(space: GalerkinSpace, u):
    u = _last_axis(space, u)
    return np.einsum("...i,i,...i->...", u, space.eigenvalues, u)


def h_norm(space: GalerkinSpace, u):
    """Euclidean norm of the coefficients."""
    return np.sqrt(h_norm_sq(space, u))


def v_norm(space: GalerkinSpace, u):
    """``sqrt(sum lambda_i u_i^2)``; never below ``sqrt(lambda_1) * h_norm``."""
    return np.sqrt(v_norm_sq(space, u))


def dual_norm_sq(space: GalerkinSpace, f):
    """Squared V' norm ``sum f_i^2 / lambda_i`` of a forcing vector."""
    f = _last_axis(space, f)
    return np.einsum("...i,i,...i->...", f, 1.0 / space.eigenvalues, f)


def a_norm(space: GalerkinSpace, u):
    """``||A u||_H``."""
    u = _last_axis(space, u)
    return np.sqrt(np.einsum("...i,i,...i->...", u, space.eigenvalues**2, u))


def q_norm(space: GalerkinSpace, u):
    # interpolation realization of the intermediate space Q
    return np.sqrt(h_norm(space, u) * v_norm(space, u))


def inner(u, v):
    return np.einsum("...i,...i->...", np.asarray(u, float), np.asarray(v, float))


def retract(u, k: float):
    """Radial retraction onto the closed H-ball of radius ``k``.

    Points inside the ball are returned unchanged (same object values); the
    zero state maps to zero.  ``k = inf`` disables the retraction.  ``k`` may
    also be an array with one radius per batch row.
    """
    k = np.asarray(k, dtype=float)
    if not np.all(k > 0):
        raise ValueError("retraction radius must be positive")
    u = np.asarray(u, dtype=float)
    if np.all(np.isinf(k)):
        return u
    r = np.sqrt(np.einsum("...i,...i->...", u, u))
    outside = r > k
    if not np.any(outside):
        return u
    scale = np.where(outside, k / np.where(outside, r, 1.0), 1.0)
    out = u * scale[..., None] if u.ndim > 1 else u * float(scale)
    # rounding can leave the norm an ulp above k; shrink until inside so that
    # a second retraction is the identity
    for _ in range(8):
        r2 = np.sqrt(np.einsum("...i,...i->...", out, out))
        over = r2 > k
        if not np.any(over):
            break
        shrink = np.where(over, 1.0 - 2.0**-52, 1.0)
        out = out * shrink[..., None] if out.ndim > 1 else out * float(shrink)
    return out


def resolvent_step(space: GalerkinSpace, mu: float, dt: float, u):
    """Apply ``(I + mu dt A)^{-1}`` coefficient-wise."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = _last_axis(space, u)
    return u / (1.0 + mu * dt * space.eigenvalues)


def random_states(space: GalerkinSpace, rng: np.random.Generator, n: int, spread: float = 2.0):
    """Random test states with varied spectral slopes.

    Each sample is Gaussian with per-mode scale ``lambda^(-alpha/2)`` for a
    random ``alpha`` in ``[0, spread]`` and a random overall amplitude, so a
    batch covers both flat and steep spectra.
    """
    alpha = rng.uniform(0.0, spread, size=(n, 1))
    amp = np.exp(rng.uniform(-2.0, 2.0, size=(n, 1)))
    lam = space.eigenvalues / space.lambda1
    return amp * rng.standard_normal((n, space.dim)) * lam ** (-alpha / 2)

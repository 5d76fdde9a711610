"""Finite-support probability measures on the Galerkin state space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EmpiricalMeasure:
    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.support, dtype=float))
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if x.shape[0] != w.size or w.size == 0:
            raise ValueError("need one positive weight per support point")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum():.15g}, not 1")
        if not np.all(np.isfinite(x)):
            raise ValueError("support points must be finite")
        object.__setattr__(self, "support", x)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_samples(cls, points, weights=None, merge: bool = True):
        """Equal (or given) weights; identical points are merged into one atom."""
        x = np.atleast_2d(np.asarray(points, dtype=float))
        w = np.full(x.shape[0], 1.0) if weights is None else np.asarray(weights, dtype=float)
        if merge and x.shape[0] > 1:
            x, inv = np.unique(x, axis=0, return_inverse=True)
            w = np.bincount(inv.reshape(-1), weights=w, minlength=x.shape[0])
        return cls(x, w / w.sum())

    @classmethod
    def dirac(cls, x):
        return cls(np.atleast_2d(np.asarray(x, dtype=float)), np.ones(1))

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    def expect(self, fn) -> float:
        """``int fn dmu`` for a vectorised ``fn`` acting on rows."""
        return float(self.weights @ np.asarray(fn(self.support), dtype=float))

    def norms(self) -> np.ndarray:
        return np.sqrt(np.einsum("ni,ni->n", self.support, self.support))


def p4_radius(mu: EmpiricalMeasure) -> float:
    """``(int |x|_H^4 dmu)^(1/4)``."""
    r = mu.norms()
    return float(mu.weights @ r**4) ** 0.25


@dataclass(frozen=True)
class MeasureBallP4:
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    def __contains__(self, mu: EmpiricalMeasure) -> bool:
        return p4_radius(mu) <= self.radius


def quasi_tight_check(measures, eps: float) -> float:
    """Smallest ``r`` with ``mu(|x|_H <= r) >= 1 - eps`` for every measure."""
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    if eps == 1:
        return 0.0
    r = 0.0
    for mu in measures:
        norms = mu.norms()
        order = np.argsort(norms, kind="stable")
        cum = np.cumsum(mu.weights[order])
        i = int(np.searchsorted(cum, 1 - eps - 1e-12))
        r = max(r, float(norms[order[min(i, norms.size - 1)]]))
    return r

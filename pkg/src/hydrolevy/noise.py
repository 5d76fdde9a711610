"""Wiener and compensated-Poisson drivers, coefficient families, certificates.

Randomness is organised per path: a :class:`DriverStream` owns three
counter-based Philox generators (Wiener normals, jump-count uniforms, mark
uniforms) keyed by ``(master_seed, path_index, channel)``.  Every step
consumes a fixed amount from the Wiener and count channels and one mark
uniform per jump, so the sequence of increments depends only on the seed,
the path index and the step count.  Changing ``eps1``/``eps2`` never changes
what is drawn, which is what couples runs at different intensities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from . import spaces
from .spaces import GalerkinSpace

# Taylor constant for | |a+b|^4 - |a|^4 - 4|a|^2 (a,b) | <= c4 (|a|^2 |b|^2 + |b|^4)
C4 = 8.0

_CHANNELS = {"wiener": 0, "count": 1, "mark": 2}


class MissingCertificateError(ValueError):
    pass


class DriverStream:
    """Deterministic per-path noise source."""

    def __init__(self, master_seed: int, path_index: int):
        if path_index < 0:
            raise ValueError("path_index must be non-negative")
        self.master_seed = int(master_seed) & (2**64 - 1)
        self.path_index = int(path_index)
        self._gens: dict = {}

    def generator(self, channel: str) -> np.random.Generator:
        g = self._gens.get(channel)
        if g is None:
            ss = np.random.SeedSequence([self.master_seed, self.path_index, _CHANNELS[channel]])
            g = np.random.Generator(np.random.Philox(ss))
            self._gens[channel] = g
        return g

    def __repr__(self):
        return f"DriverStream(master_seed={self.master_seed}, path_index={self.path_index})"


# -- coefficient families ------------------------------------------------------

FAMILIES = ("additive", "linear_diagonal", "bounded_multiplicative")


@dataclass(frozen=True)
class WienerSpec:
    """Diagonal Wiener coefficient: column ``k`` of ``h(u)`` is ``diag(u)[k] e_k``."""

    rank: int
    diag: Callable = field(repr=False)

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("Wiener rank must be at least 1")

    def columns(self, u) -> np.ndarray:
        d = self.diag(u)
        return d[..., :, None] * np.eye(self.rank)

    def apply(self, u, dw) -> np.ndarray:
        return self.diag(u) * dw

    def hs_norm_sq(self, u, weights=None):
        d = self.diag(u)
        if weights is None:
            return np.einsum("...i,...i->...", d, d)
        return np.einsum("...i,i,...i->...", d, weights, d)


@dataclass(frozen=True)
class JumpSpec:
    """Finite mark measure ``sum_a w_a delta_{z_a}`` and a kernel ``G(u, z)``.

    Marks are real arrays broadcastable against a state.
    """

    weights: np.ndarray
    marks: tuple
    kernel: Callable = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.marks) != w.size:
            raise ValueError("one weight per mark required")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("mark weights must be positive and finite")
        marks = tuple(np.asarray(z, dtype=float) for z in self.marks)
        for z in marks:
            if not np.any(z != 0):
                raise ValueError("zero marks are not allowed (nu({0}) = 0)")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "marks", marks)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def n_atoms(self) -> int:
        return self.weights.size

    def kernel_all(self, u) -> np.ndarray:
        """``G(u, z_a)`` for every atom, shape ``(..., n_atoms, dim)``."""
        u = np.asarray(u, dtype=float)
        if self.n_atoms == 0:
            return np.zeros((*u.shape[:-1], 0, u.shape[-1]))
        return np.stack([np.broadcast_to(self.kernel(u, z), u.shape) for z in self.marks], axis=-2)


@dataclass(frozen=True)
class NoiseSpec:
    space: GalerkinSpace = field(repr=False)
    family: str
    sigma: np.ndarray
    wiener: WienerSpec
    jumps: JumpSpec
    eps1: float
    eps2: float
    certified_Lg: float | None = None
    certified_Lr: Callable | None = field(default=None, repr=False)
    certified_Lg_tilde: float | None = None
    certified_Lgv_hat: float | None = None

    def __post_init__(self):
        for name in ("eps1", "eps2"):
            e = getattr(self, name)
            if not 0.0 <= e <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def with_intensities(self, eps1: float, eps2: float) -> "NoiseSpec":
        return NoiseSpec(self.space, self.family, self.sigma, self.wiener, self.jumps, eps1, eps2,
                         self.certified_Lg, self.certified_Lr, self.certified_Lg_tilde,
                         self.certified_Lgv_hat)

    @property
    def is_off(self) -> bool:
        return (self.eps1 == 0 or not np.any(self.sigma)) and (self.eps2 == 0 or self.jumps.n_atoms == 0)


def _shrink(u):
    # u / (1 + |u|_H): 1-Lipschitz and bounded by 1
    r = np.sqrt(np.einsum("...i,...i->...", u, u))
    return u / (1.0 + r)[..., None]


def make_noise(space: GalerkinSpace, family: str, sigma, marks=(), weights=(),
               eps1: float = 1.0, eps2: float = 1.0, **certificates) -> NoiseSpec:
    """Build one of the built-in families with closed-form certificates.

    ``additive``: ``h(u) = diag(sigma)``, ``G(u, z) = z``.
    ``linear_diagonal``: ``h(u) = diag(sigma * u)``, ``G(u, z) = z * u``.
    ``bounded_multiplicative``: as linear with ``u`` replaced by ``u / (1 + |u|_H)``.

    Keyword arguments ``certified_Lg`` etc. override the computed certificates.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown noise family {family!r}")
    dim = space.dim
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (dim,)).copy()
    lam = space.eigenvalues
    zs = [np.broadcast_to(np.asarray(z, dtype=float), (dim,)).copy() for z in marks]
    w = np.asarray(weights, dtype=float).reshape(-1)

    if family == "additive":
        def diag(u):
            u = np.asarray(u, dtype=float)
            return np.broadcast_to(sigma, u.shape)

        def kernel(u, z):
            return np.broadcast_to(z, np.shape(u))

        Lg = float(sigma @ sigma + sum(wa * (z @ z) for wa, z in zip(w, zs)))
        Lg_t = float(sum(wa * (z @ z) ** 2 for wa, z in zip(w, zs)))
        Lgv = float(sigma @ (lam * sigma) + sum(wa * (z @ (lam * z)) for wa, z in zip(w, zs)))
        Lr_const = 0.0
    else:
        bounded = family == "bounded_multiplicative"

        def diag(u):
            u = np.asarray(u, dtype=float)
            return sigma * (_shrink(u) if bounded else u)

        def kernel(u, z):
            u = np.asarray(u, dtype=float)
            return z * (_shrink(u) if bounded else u)

        zmax2 = [float(np.max(z * z)) for z in zs]
        Lg = float(np.max(sigma**2) + sum(wa * m for wa, m in zip(w, zmax2)))
        Lg_t = float(sum(wa * m * m for wa, m in zip(w, zmax2)))
        Lgv = Lg
        Lr_const = Lg

    jumps = JumpSpec(w, tuple(zs), kernel)
    certs = dict(certified_Lg=Lg, certified_Lr=lambda r, c=Lr_const: c,
                 certified_Lg_tilde=Lg_t, certified_Lgv_hat=Lgv)
    for key, val in certificates.items():
        if key not in certs:
            raise TypeError(f"unknown certificate {key!r}")
        if key == "certified_Lr" and not callable(val):
            val = (lambda r, c=float(val): c)
        certs[key] = val
    return NoiseSpec(space, family, sigma, WienerSpec(dim, diag), jumps, float(eps1), float(eps2), **certs)


def no_noise(space: GalerkinSpace) -> NoiseSpec:
    return make_noise(space, "additive", 0.0, eps1=0.0, eps2=0.0)


# -- drivers -----------------------------------------------------------------

def _poisson_counts(uniforms, mean: float):
    if mean <= 0:
        return np.zeros(np.shape(uniforms), dtype=np.int64)
    k = stats.poisson.ppf(uniforms, mean)
    return np.maximum(k, 0).astype(np.int64)


def _mark_table(jumps: JumpSpec):
    cum = np.cumsum(jumps.weights) / jumps.total_mass
    cum[-1] = 1.0
    return cum


def wiener_increment(stream: DriverStream, m: int, dt: float) -> np.ndarray:
    """``m`` iid N(0, dt) entries; the draw is consumed even when ``dt = 0``."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    z = stream.generator("wiener").standard_normal(m)
    return math.sqrt(dt) * z


def jump_atoms(stream: DriverStream, jumps: JumpSpec, dt: float) -> np.ndarray:
    """Atom indices of the jumps falling in one step of length ``dt``."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    u = stream.generator("count").random(1)
    if jumps.n_atoms == 0:
        return np.zeros(0, dtype=np.intp)
    n = int(_poisson_counts(u, jumps.total_mass * dt)[0])
    if n == 0:
        return np.zeros(0, dtype=np.intp)
    um = stream.generator("mark").random(n)
    return np.searchsorted(_mark_table(jumps), um, side="right")


def poisson_jumps(stream: DriverStream, jumps: JumpSpec, dt: float) -> list:
    """Marks of a Poisson(Lambda dt) number of jumps, iid from ``nu / Lambda``."""
    return [jumps.marks[a] for a in jump_atoms(stream, jumps, dt)]


def draw_block(streams, noise: NoiseSpec, dt: float, n_steps: int):
    """Pre-draw ``n_steps`` steps for several paths at once.

    Returns ``dw`` of shape ``(paths, n_steps, rank)`` and per-atom jump counts
    ``(paths, n_steps, n_atoms)``.  Consumes each stream exactly as
    ``n_steps`` successive calls of :func:`wiener_increment` and
    :func:`jump_atoms` would.
    """
    m = noise.wiener.rank
    A = noise.jumps.n_atoms
    P = len(streams)
    dw = np.empty((P, n_steps, m))
    counts = np.zeros((P, n_steps, A), dtype=np.int64)
    sq = math.sqrt(dt)
    mean = noise.jumps.total_mass * dt
    cum = _mark_table(noise.jumps) if A else None
    for p, s in enumerate(streams):
        dw[p] = s.generator("wiener").standard_normal((n_steps, m)) * sq
        uc = s.generator("count").random(n_steps)
        if A == 0:
            continue
        n = _poisson_counts(uc, mean)
        tot = int(n.sum())
        if tot:
            atoms = np.searchsorted(cum, s.generator("mark").random(tot), side="right")
            np.add.at(counts[p], (np.repeat(np.arange(n_steps), n), atoms), 1)
    return dw, counts


def compensator_drift(noise: NoiseSpec, u) -> np.ndarray:
    """``sum_a w_a G(u, z_a)``."""
    u = np.asarray(u, dtype=float)
    if noise.jumps.n_atoms == 0:
        return np.zeros_like(u)
    return np.einsum("a,...ai->...i", noise.jumps.weights, noise.jumps.kernel_all(u))


# -- certificates ------------------------------------------------------------

@dataclass
class CertificateReport:
    family: str
    samples: int
    Lg_estimate: float
    Lg_tilde_estimate: float
    Lgv_hat_estimate: float
    Lr_radius: float
    Lr_estimate: float
    certified_Lg: float | None
    certified_Lg_tilde: float | None
    certified_Lgv_hat: float | None
    certified_Lr: float | None
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["passed"] = self.passed
        return d


def growth_ratios(noise: NoiseSpec, u):
    """Ratios of C2, C4 with p=4 and C5 at states ``u``."""
    space = noise.space
    hu2 = spaces.h_norm_sq(space, u)
    vu2 = spaces.v_norm_sq(space, u)
    w = noise.jumps.weights
    gk = noise.jumps.kernel_all(u)
    g2 = np.einsum("...ai,...ai->...a", gk, gk)
    g2v = np.einsum("...ai,i,...ai->...a", gk, space.eigenvalues, gk)
    lg = (noise.wiener.hs_norm_sq(u) + g2 @ w) / (1 + hu2)
    lgt = (g2**2 @ w) / (1 + hu2**2)
    lgv = (noise.wiener.hs_norm_sq(u, space.eigenvalues) + g2v @ w) / (1 + vu2)
    return lg, lgt, lgv


def lipschitz_ratio(noise: NoiseSpec, u, v):
    space = noise.space
    du = u - v
    dh = noise.wiener.diag(u) - noise.wiener.diag(v)
    dg = noise.jumps.kernel_all(u) - noise.jumps.kernel_all(v)
    num = np.einsum("...i,...i->...", dh, dh) + np.einsum("...ai,...ai->...a", dg, dg) @ noise.jumps.weights
    den = spaces.h_norm_sq(space, du)
    return num / np.where(den > 0, den, 1.0)


def growth_certificate(noise: NoiseSpec, samples: int, rng,
                       radius: float = 10.0, rtol: float = 1e-12) -> CertificateReport:
    """Monte Carlo sup of every growth/Lipschitz ratio against the certificates."""
    if samples < 1:
        raise ValueError("samples must be at least 1")
    space = noise.space
    rng = np.random.default_rng(rng)
    u = spaces.random_states(space, rng, samples)
    u[0] = 0.0
    lg, lgt, lgv = growth_ratios(noise, u)
    a = spaces.retract(spaces.random_states(space, rng, samples), radius)
    b = spaces.retract(spaces.random_states(space, rng, samples), radius)
    lr = lipschitz_ratio(noise, a, b)
    est = dict(Lg=float(lg.max()), Lg_tilde=float(lgt.max()), Lgv_hat=float(lgv.max()), Lr=float(lr.max()))
    cert_lr = noise.certified_Lr(radius) if noise.certified_Lr is not None else None
    certs = dict(Lg=noise.certified_Lg, Lg_tilde=noise.certified_Lg_tilde,
                 Lgv_hat=noise.certified_Lgv_hat, Lr=cert_lr)
    failures = []
    for key, val in est.items():
        c = certs[key]
        if c is not None and val > c * (1 + rtol) + rtol:
            failures.append(f"{key} estimate {val:.6g} exceeds certified {c:.6g}")
    return CertificateReport(noise.family, samples, est["Lg"], est["Lg_tilde"], est["Lgv_hat"],
                             radius, est["Lr"], noise.certified_Lg, noise.certified_Lg_tilde,
                             noise.certified_Lgv_hat, cert_lr, failures)


def eps0_thresholds(model, noise: NoiseSpec, c4: float = C4) -> dict:
    """Intensity thresholds of the absorbing-set and moment lemmas.

    ``eps0_L41 = sqrt(mu l1 / (2 Lg))``,
    ``eps0_L63 = sqrt(mu l1 / (12 Lg + 2 c4 Lg + 8 c4 Lg~))``,
    ``eps0_L64 = min(sqrt(mu l1 / (2 Lgv^)), eps0_L63)``; ``overall`` is the
    smallest of the three clamped to 1.  Zero constants give infinite thresholds.
    """
    if noise.certified_Lg is None:
        raise MissingCertificateError("certified_Lg is required")
    if noise.certified_Lg_tilde is None or noise.certified_Lgv_hat is None:
        raise MissingCertificateError("certified_Lg_tilde and certified_Lgv_hat are required")
    Lg, Lt, Lv = noise.certified_Lg, noise.certified_Lg_tilde, noise.certified_Lgv_hat
    ml = model.mu * model.lambda1

    def root(den):
        return math.inf if den <= 0 else math.sqrt(ml / den)

    e41 = root(2 * Lg)
    e63 = root(12 * Lg + 2 * c4 * Lg + 8 * c4 * Lt)
    e64 = min(root(2 * Lv), e63)
    return dict(eps0_L41=e41, eps0_L63=e63, eps0_L64=e64, overall=min(e41, e63, e64, 1.0))

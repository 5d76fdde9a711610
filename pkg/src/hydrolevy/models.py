"""Concrete operator pairs (A, B): Sabra shell model, 2D Navier-Stokes, linear.

Every model exposes ``bilinear(u, v)`` (batched over leading axes) and a
``quadratic(u)`` fast path equal to ``bilinear(u, u)``.  Both return the
coefficients of B in the same basis as the state, so ``<B(u, v), w>`` is a
plain dot product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import spaces
from .spaces import GalerkinSpace


@dataclass(frozen=True)
class ModelSpec:
    space: GalerkinSpace
    mu: float
    kind: str
    params: dict
    bilinear: Callable = field(repr=False)
    quadratic: Callable = field(repr=False)
    certified_c0_B2: float = 1.0
    certified_C_B3: float = math.inf
    certified_c0_B4: float | None = None

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("viscosity must be positive")

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def lambda1(self) -> float:
        return self.space.lambda1


class TriadTensor:
    """Sparse real trilinear coefficients: ``out_i = sum c * u_j * v_k``."""

    def __init__(self, dim, i, j, k, c):
        self.dim = dim
        self.i = np.asarray(i, dtype=np.intp)
        self.j = np.asarray(j, dtype=np.intp)
        self.k = np.asarray(k, dtype=np.intp)
        self.c = np.asarray(c, dtype=float)
        n = self.c.size
        self._scatter = sp.csr_matrix((np.ones(n), (np.arange(n), self.i)), shape=(n, dim))

    @classmethod
    def from_dense(cls, t: np.ndarray, rtol: float = 1e-14):
        scale = np.max(np.abs(t)) if t.size else 0.0
        idx = np.nonzero(np.abs(t) > rtol * scale)
        return cls(t.shape[0], idx[0], idx[1], idx[2], t[idx])

    def __call__(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        lead = np.broadcast_shapes(u.shape[:-1], v.shape[:-1])
        u2 = np.broadcast_to(u, (*lead, self.dim)).reshape(-1, self.dim)
        v2 = np.broadcast_to(v, (*lead, self.dim)).reshape(-1, self.dim)
        terms = u2[:, self.j] * v2[:, self.k] * self.c
        out = np.asarray(terms @ self._scatter)
        return out.reshape(*lead, self.dim)

    def dense(self) -> np.ndarray:
        t = np.zeros((self.dim,) * 3)
        np.add.at(t, (self.i, self.j, self.k), self.c)
        return t


def skew_from_quadratic(quadratic: Callable, dim: int) -> TriadTensor:
    """Bilinear map with ``<B(u,v),w> = -<B(u,w),v>`` and ``B(u,u) = quadratic(u)``.

    With ``Q`` the symmetric polarization of the quadratic and ``<Q(u,u),u> = 0``,
    the map ``(2/3)(Q(u,v) - Q(u,.)^T v)`` has both properties.
    """
    eye = np.eye(dim)
    plus = quadratic(eye[:, None, :] + eye[None, :, :])
    minus = quadratic(eye[:, None, :] - eye[None, :, :])
    q = (plus - minus) / 4.0  # q[j, k, i] = Q(e_j, e_k)_i
    t = np.transpose(q, (2, 0, 1))  # t[i, j, k]
    skew = (2.0 / 3.0) * (t - np.transpose(t, (2, 1, 0)))
    return TriadTensor.from_dense(skew)


# -- Sabra -----------------------------------------------------------------

def sabra_wavenumbers(n_shells: int, k0: float) -> np.ndarray:
    return k0 * 2.0 ** np.arange(1, n_shells + 1)


def sabra_rhs(z: np.ndarray, k0: float, a: float, b: float, c: float) -> np.ndarray:
    """Sabra coupling on complex amplitudes ``z[..., n]``, shells 1..N.

    i (a k_{n+1} u_{n+2} u*_{n+1} + b k_n u_{n+1} u*_{n-1} - c k_{n-1} u_{n-1} u_{n-2})
    with zero padding beyond both ends.
    """
    n = z.shape[-1]
    pad = np.zeros((*z.shape[:-1], n + 4), dtype=complex)
    pad[..., 2:n + 2] = z
    k = sabra_wavenumbers(n, k0)
    up2 = pad[..., 4:]
    up1 = pad[..., 3:n + 3]
    um1 = pad[..., 1:n + 1]
    um2 = pad[..., 0:n]
    return 1j * (a * 2 * k * up2 * np.conj(up1) + b * k * up1 * np.conj(um1) - c * (k / 2) * um1 * um2)


def _to_complex(u):
    return u[..., 0::2] + 1j * u[..., 1::2]


def _to_real(z):
    out = np.empty((*z.shape[:-1], 2 * z.shape[-1]))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def build_sabra(n_shells: int = 16, k0: float = 1.0, a: float = 1.0, b: float = -0.5,
                c: float = -0.5, mu: float = 1.0, certified_C_B3: float = 0.4,
                certified_c0_B4: float | None = 0.25) -> ModelSpec:
    """Sabra shell model on ``2 * n_shells`` real coefficients.

    Shell ``n`` has wavenumber ``k0 * 2**n`` and eigenvalue ``k_n**2``, so
    ``lambda_1 = 4 k0**2``.  The default certified constants are about twice
    the largest ratios reached by BFGS ascent started from the best of 10^5
    random samples (0.1822 for B3, 0.125 for B4 at N=16, k0=1; every
    start converged to these values).
    """
    if n_shells < 4:
        raise ValueError("Sabra needs at least 4 shells")
    if not k0 > 0:
        raise ValueError("k0 must be positive")
    if abs(a + b + c) > 1e-12 * max(abs(a), abs(b), abs(c), 1.0):
        raise ValueError("coefficients must satisfy a + b + c = 0 for energy conservation")
    k = sabra_wavenumbers(n_shells, k0)
    lam = np.repeat(k**2, 2)
    labels = tuple(("shell", n, part) for n in range(1, n_shells + 1) for part in ("re", "im"))
    space = GalerkinSpace(lam, labels)

    def quadratic(u):
        u = np.asarray(u, dtype=float)
        return -_to_real(sabra_rhs(_to_complex(u), k0, a, b, c))

    tensor = skew_from_quadratic(quadratic, space.dim)
    params = dict(n_shells=n_shells, k0=k0, a=a, b=b, c=c)
    return ModelSpec(space, mu, "sabra", params, tensor, quadratic,
                     certified_c0_B2=1.0, certified_C_B3=certified_C_B3,
                     certified_c0_B4=certified_c0_B4)


# -- 2D Navier-Stokes --------------------------------------------------------

class NSE2DBasis:
    """Divergence-free real Fourier basis on the 2pi-periodic torus.

    For each wavevector ``k`` in the upper half plane with ``0 < |k| <= K``
    the pair ``sqrt(2) e_k cos(k.x)``, ``sqrt(2) e_k sin(k.x)`` with
    ``e_k = k_perp / |k|`` is orthonormal for the mean-square inner product.
    Products are evaluated on an ``M x M`` grid with ``M > 3K``, which makes
    the Galerkin projection of ``(u . grad) v`` exact.
    """

    def __init__(self, kmax: int):
        ks = [(kx, ky) for kx in range(0, kmax + 1) for ky in range(-kmax, kmax + 1)
              if (kx > 0 or ky > 0) and 0 < kx * kx + ky * ky <= kmax * kmax]
        ks.sort(key=lambda q: (q[0] ** 2 + q[1] ** 2, q[0], q[1]))
        self.kmax = kmax
        self.wavevectors = np.array(ks, dtype=int)
        self.n_modes = len(ks)
        self.grid = 1 << int(math.ceil(math.log2(3 * kmax + 1)))
        kk = self.wavevectors.astype(float)
        knorm = np.sqrt((kk**2).sum(axis=1))
        self.polarization = np.stack([-kk[:, 1], kk[:, 0]], axis=1) / knorm[:, None]
        kx, ky = self.wavevectors[:, 0], self.wavevectors[:, 1]
        # rfft2 keeps ky >= 0; modes with ky < 0 are stored through their conjugate at -k
        self.direct = ky >= 0
        self.px = np.where(self.direct, kx, -kx) % self.grid
        self.py = np.where(self.direct, ky, -ky)
        self.zero_col = np.nonzero(ky == 0)[0]
        self.zx = (-kx[self.zero_col]) % self.grid
        freq = np.fft.fftfreq(self.grid, 1.0 / self.grid)
        self.kx_grid = freq[:, None] * np.ones(self.grid // 2 + 1)[None, :]
        self.ky_grid = np.ones(self.grid)[:, None] * np.arange(self.grid // 2 + 1)[None, :]

    def spectrum(self, coeffs):
        """Half-plane (``rfft2`` layout) Fourier coefficients ``(..., 2, M, M//2+1)``."""
        coeffs = np.asarray(coeffs, dtype=float)
        lead = coeffs.shape[:-1]
        amp = (coeffs[..., 0::2] - 1j * coeffs[..., 1::2]) * (math.sqrt(2.0) / 2.0)
        spec = np.zeros((*lead, 2, self.grid, self.grid // 2 + 1), dtype=complex)
        for comp in range(2):
            val = amp * self.polarization[:, comp]
            spec[..., comp, self.px, self.py] = np.where(self.direct, val, np.conj(val))
            # the ky = 0 column is stored in full, so the mirror entry is needed too
            spec[..., comp, self.zx, 0] = np.conj(val[..., self.zero_col])
        return spec

    def field(self, coeffs):
        return self._inverse(self.spectrum(coeffs))

    def _inverse(self, spec):
        m = self.grid
        return np.fft.irfft2(spec, s=(m, m), axes=(-2, -1)) * (m * m)

    def project(self, field):
        """Coefficients of the orthogonal projection of a grid vector field."""
        m = self.grid
        hat = np.fft.rfft2(field, axes=(-2, -1)) / (m * m)
        gk = hat[..., :, self.px, self.py]
        gk = np.where(self.direct, gk, np.conj(gk))  # (..., 2, n_modes)
        proj = np.einsum("...cm,mc->...m", gk, self.polarization)
        out = np.empty((*field.shape[:-3], 2 * self.n_modes))
        out[..., 0::2] = math.sqrt(2.0) * proj.real
        out[..., 1::2] = -math.sqrt(2.0) * proj.imag
        return out

    def advect(self, u, v):
        """Projected ``(u . grad) v`` for coefficient arrays ``u``, ``v``."""
        uf = self.field(u)
        vs = self.spectrum(v)
        g = uf[..., 0:1, :, :] * self._inverse(1j * self.kx_grid * vs)
        g += uf[..., 1:2, :, :] * self._inverse(1j * self.ky_grid * vs)
        return self.project(g)


def build_nse2d(kmax: int = 8, mu: float = 1.0, certified_C_B3: float = 2.0,
                certified_c0_B4: float | None = 2.0, chunk: int = 512) -> ModelSpec:
    """Spectral Galerkin 2D Navier-Stokes on the torus with ``|k| <= kmax``.

    Gradient ascent on the B3/B4 ratios finds sups near 0.80/0.68 at
    ``kmax=4`` and 0.93/0.89 at ``kmax=8``; the defaults of 2.0 cover both.
    """
    if kmax < 2:
        raise ValueError("kmax must be at least 2")
    basis = NSE2DBasis(kmax)
    k2 = (basis.wavevectors**2).sum(axis=1).astype(float)
    lam = np.repeat(k2, 2)
    labels = tuple(("k", tuple(int(x) for x in kv), part)
                   for kv in basis.wavevectors for part in ("cos", "sin"))
    space = GalerkinSpace(lam, labels)
    dim = space.dim

    def bilinear(u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        lead = np.broadcast_shapes(u.shape[:-1], v.shape[:-1])
        u2 = np.broadcast_to(u, (*lead, dim)).reshape(-1, dim)
        v2 = np.broadcast_to(v, (*lead, dim)).reshape(-1, dim)
        out = np.empty_like(u2)
        for s in range(0, u2.shape[0], chunk):
            out[s:s + chunk] = basis.advect(u2[s:s + chunk], v2[s:s + chunk])
        return out.reshape(*lead, dim)

    def quadratic(u):
        return bilinear(u, u)

    model = ModelSpec(space, mu, "nse2d", dict(kmax=kmax), bilinear, quadratic,
                      certified_c0_B2=1.0, certified_C_B3=certified_C_B3,
                      certified_c0_B4=certified_c0_B4)
    object.__setattr__(model, "basis", basis)
    return model


def build_linear(eigenvalues, mu: float = 1.0) -> ModelSpec:
    """Model with ``B = 0``: independent Ornstein-Uhlenbeck modes under additive noise."""
    space = GalerkinSpace(np.asarray(eigenvalues, dtype=float))

    def bilinear(u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return np.zeros(np.broadcast_shapes(u.shape, v.shape))

    def quadratic(u):
        return np.zeros_like(np.asarray(u, dtype=float))

    return ModelSpec(space, mu, "linear", {}, bilinear, quadratic,
                     certified_c0_B2=1.0, certified_C_B3=0.0, certified_c0_B4=0.0)


# -- forcing -----------------------------------------------------------------

class DivergentIntegralError(ValueError):
    pass


@dataclass(frozen=True)
class ForcingSpec:
    """Deterministic forcing ``f(t)`` as a coefficient vector.

    kinds: ``constant`` (``f_inf``), ``exp_approach`` (``f_inf + exp(rate t) g``
    for ``t <= 0`` and ``f_inf`` afterwards), ``tabulated`` (piecewise linear
    through ``(times, states)``, held constant outside the table).
    """

    kind: str
    f_inf: np.ndarray
    g: np.ndarray | None = None
    rate: float = 1.0
    times: np.ndarray | None = None
    states: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "f_inf", np.asarray(self.f_inf, dtype=float))
        if self.kind == "constant":
            pass
        elif self.kind == "exp_approach":
            if self.g is None or not self.rate > 0:
                raise ValueError("exp_approach needs g and a positive rate")
            object.__setattr__(self, "g", np.asarray(self.g, dtype=float))
        elif self.kind == "tabulated":
            t = np.asarray(self.times, dtype=float)
            s = np.asarray(self.states, dtype=float)
            if t.ndim != 1 or s.shape != (t.size, self.f_inf.size) or np.any(np.diff(t) <= 0):
                raise ValueError("tabulated forcing needs increasing times and one state per time")
            object.__setattr__(self, "times", t)
            object.__setattr__(self, "states", s)
        else:
            raise ValueError(f"unknown forcing kind {self.kind!r}")

    @classmethod
    def constant(cls, f):
        return cls("constant", f)

    @classmethod
    def exp_approach(cls, f_inf, g, rate):
        return cls("exp_approach", f_inf, g=g, rate=rate)

    @property
    def autonomous(self) -> bool:
        return self.kind == "constant"

    def __call__(self, t: float) -> np.ndarray:
        if self.kind == "constant":
            return self.f_inf
        if self.kind == "exp_approach":
            return self.f_inf + math.exp(self.rate * t) * self.g if t <= 0 else self.f_inf
        i = np.searchsorted(self.times, t)
        if i == 0:
            return self.states[0]
        if i >= self.times.size:
            return self.states[-1]
        w = (t - self.times[i - 1]) / (self.times[i] - self.times[i - 1])
        return (1 - w) * self.states[i - 1] + w * self.states[i]


def _norm_weights(space: GalerkinSpace, which: str) -> np.ndarray:
    if which == "2_dualV":
        return 1.0 / space.eigenvalues
    if which == "4_H" or which == "2_H":
        return np.ones(space.dim)
    raise ValueError(f"unknown norm selector {which!r}")


def _exp_poly(space, f: ForcingSpec, which: str):
    # ||f_inf + e g||^p as a polynomial in e = exp(rate s)
    w = _norm_weights(space, which)
    a = float(np.sum(w * f.f_inf * f.f_inf))
    c = float(np.sum(w * f.f_inf * f.g))
    g = float(np.sum(w * f.g * f.g))
    quad = np.array([a, 2 * c, g])
    return np.convolve(quad, quad) if which == "4_H" else quad


def _gauss_segments(fun, t0, t1, pieces=64, order=8):
    x, wts = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(t0, t1, pieces + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        s = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        total += 0.5 * (hi - lo) * float(np.sum(wts * np.array([fun(si) for si in s])))
    return total


def forcing_weighted_integral(space: GalerkinSpace, f: ForcingSpec, kappa: float, tau: float,
                              power: str = "2_dualV") -> float:
    """``int_{-inf}^{tau} exp(kappa (s - tau)) ||f(s)||^p ds``.

    ``power`` is ``"2_dualV"`` (squared V' norm) or ``"4_H"`` (fourth power of
    the H norm).  Closed form for constant and exp_approach forcing.
    """
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    w = _norm_weights(space, power)
    p = 2 if power == "2_dualV" else 4

    def normp(vec):
        return float(np.sum(w * vec * vec)) ** (p / 2)

    if f.kind == "constant":
        return normp(f.f_inf) / kappa
    if f.kind == "exp_approach":
        coef = _exp_poly(space, f, power)
        sig = f.rate
        top = min(tau, 0.0)
        # sum_j coef_j int_{-inf}^{top} e^{kappa (s - tau)} e^{j sig s} ds
        val = sum(cj * math.exp(j * sig * top + kappa * (top - tau)) / (kappa + j * sig)
                  for j, cj in enumerate(coef))
        if tau > 0:
            val += normp(f.f_inf) * (1.0 - math.exp(-kappa * tau)) / kappa
        return val
    t0 = f.times[0]
    tail = normp(f.states[0]) * math.exp(kappa * (min(t0, tau) - tau)) / kappa
    if tau <= t0:
        return tail
    return tail + _gauss_segments(lambda s: math.exp(kappa * (s - tau)) * normp(f(s)), t0, tau)


def autonomy_integral(f: ForcingSpec, upper: float) -> float:
    """``int_{-inf}^{upper} ||f(s) - f_inf||_H^2 ds``; finite only if ``f -> f_inf`` fast enough."""
    if f.kind == "constant":
        return 0.0
    if f.kind == "exp_approach":
        gg = float(f.g @ f.g)
        return gg * math.exp(2 * f.rate * min(upper, 0.0)) / (2 * f.rate)
    d0 = f.states[0] - f.f_inf
    if float(d0 @ d0) > 0:
        raise DivergentIntegralError("tabulated forcing does not approach f_inf before its first time")
    if upper <= f.times[0]:
        return 0.0
    return _gauss_segments(lambda s: float(np.sum((f(s) - f.f_inf) ** 2)), f.times[0],
                           min(upper, f.times[-1])) + (
        float(np.sum((f.states[-1] - f.f_inf) ** 2)) * max(0.0, upper - f.times[-1]))


# -- hypothesis verification -------------------------------------------------

@dataclass
class HypothesisReport:
    model_kind: str
    samples: int
    skew_defect: float
    energy_defect: float
    bilinearity_defect: float
    poincare_defect: float
    C_B3_estimate: float
    c0_B4_estimate: float
    certified_C_B3: float
    certified_c0_B4: float | None
    tolerance: float
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["passed"] = self.passed
        return d


def verify_hypotheses(model: ModelSpec, samples: int, rng_seed: int = 0,
                      tolerance: float = 1e-10, chunk: int = 1000,
                      bilinear_samples: int = 1000) -> HypothesisReport:
    """Sample random triples and measure skew-symmetry defects and the constants of B3/B4."""
    if samples < 1:
        raise ValueError("samples must be at least 1")
    space = model.space
    rng = np.random.default_rng(rng_seed)
    skew = energy = bil = poin = 0.0
    c_est = c0_est = 0.0
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        u, v, w = (spaces.random_states(space, rng, n) for _ in range(3))
        buv = model.bilinear(u, v)
        buw = model.bilinear(u, w)
        bvw = spaces.inner(buv, w)
        bwv = spaces.inner(buw, v)
        hu, hv, hw = (spaces.h_norm(space, x) for x in (u, v, w))
        vu, vv = spaces.v_norm(space, u), spaces.v_norm(space, v)
        scale = spaces.h_norm(space, buv) * hw + spaces.h_norm(space, buw) * hv
        scale = np.where(scale > 0, scale, 1.0)
        skew = max(skew, float(np.max(np.abs(bvw + bwv) / scale)))
        energy = max(energy, float(np.max(np.abs(spaces.inner(buv, v)) / (hu * vv**2))))
        poin = max(poin, float(np.max((space.lambda1 * hu**2 - vu**2) / vu**2)))
        c_ratio = np.abs(bvw) / (spaces.q_norm(space, u) * vv * spaces.q_norm(space, w))
        c_est = max(c_est, float(np.max(c_ratio)))
        c0_ratio = spaces.h_norm(space, buv) ** 2 / (hu * vu * spaces.a_norm(space, v) * vv)
        c0_est = max(c0_est, float(np.max(c0_ratio)))
        if done < bilinear_samples:
            m = min(n, bilinear_samples - done)
            x = spaces.random_states(space, rng, m)
            alpha = rng.standard_normal((m, 1))
            bxv = model.bilinear(x, v[:m])
            lhs = model.bilinear(alpha * u[:m] + x, v[:m]) - alpha * buv[:m] - bxv
            rhs = model.bilinear(u[:m], alpha * v[:m] + x) - alpha * buv[:m] - model.bilinear(u[:m], x)
            ref = np.abs(alpha[:, 0]) * spaces.h_norm(space, buv[:m]) + spaces.h_norm(space, bxv) + 1e-300
            bil = max(bil, float(np.max((spaces.h_norm(space, lhs) + spaces.h_norm(space, rhs)) / ref)))
        done += n
    failures = []
    if skew > tolerance:
        failures.append(f"skew-symmetry defect {skew:.3e} > {tolerance:.1e}")
    if energy > tolerance:
        failures.append(f"energy neutrality defect {energy:.3e} > {tolerance:.1e}")
    if bil > 1e-9:
        failures.append(f"bilinearity defect {bil:.3e}")
    if poin > 1e-12:
        failures.append(f"Poincare defect {poin:.3e}")
    if c_est > model.certified_C_B3:
        failures.append(f"B3 estimate {c_est:.4g} exceeds certified {model.certified_C_B3:.4g}")
    if model.certified_c0_B4 is not None and c0_est > model.certified_c0_B4:
        failures.append(f"B4 estimate {c0_est:.4g} exceeds certified {model.certified_c0_B4:.4g}")
    return HypothesisReport(model.kind, samples, skew, energy, bil, poin, c_est, c0_est,
                            model.certified_C_B3, model.certified_c0_B4, tolerance, failures)

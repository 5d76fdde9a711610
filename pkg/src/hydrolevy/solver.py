"""Semi-implicit Euler scheme for  du + (mu A u + B(u,u)) dt = f dt + eps1 h dW + eps2 int G dN~.

One engine advances a batch of paths ``(P, dim)``; :func:`simulate_path`
runs it with ``P = 1`` and :func:`run_ensemble` splits the path indices into
fixed-size blocks that may be handed to worker threads.  The block size does
not depend on the number of workers, and every path draws from its own
:class:`~hydrolevy.noise.DriverStream`, so results are identical for any
worker count.

Energy ledger (cumulative, one column each), with ``u`` the pre-step state:

    dissipation   2 mu |u|_V^2 dt
    forcing       2 <f, u> dt
    wiener_qv     eps1^2 |h(u~)|_L2^2 dt
    jump_qv       eps2^2 sum_jumps |G(u~, z)|^2
    wiener_mart   2 eps1 <u, h(u~) dW>
    jump_mart     2 eps2 <u, sum_jumps G - dt sum_a w_a G(u~, z_a)>

so that ``|u_m|^2 - |u_0|^2 ~ -dissipation + the rest``.

The time integrals ``int |u|_V^2`` and ``int |u|_H^2 |u|_V^2`` used by the
moment diagnostics are accumulated at the post-step state.  For stiff modes
(``mu lambda dt >> 1``) the pre-step sum would charge a full ``dt`` of an
initial V-norm the implicit step removes at once; the post-step sum obeys
the discrete energy inequality ``|u_n|^2 - |u_{n+1}|^2 >= 2 mu dt |u_{n+1}|_V^2``
of the linear part.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import noise as nz
from . import spaces
from .models import ForcingSpec, ModelSpec, forcing_weighted_integral

LEDGER_FIELDS = ("dissipation", "forcing", "wiener_qv", "jump_qv", "wiener_mart", "jump_mart")
_LEDGER_SIGN = np.array([-1.0, 1.0, 1.0, 1.0, 1.0, 1.0])

# one-sided 95% normal quantile used for all upper confidence limits
Z95 = 1.6448536269514722


class BlowUpError(FloatingPointError):
    """Non-finite state produced by a step."""


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-3
    truncation_radius: float = math.inf
    escalate_truncation: bool = False
    record_stride: int = 1
    kappa: float | None = None
    kappa_tilde: float | None = None
    block_size: int = 64
    chunk_steps: int = 256

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.truncation_radius > 0:
            raise ValueError("truncation radius must be positive")
        if self.record_stride < 1 or self.block_size < 1 or self.chunk_steps < 1:
            raise ValueError("record_stride, block_size and chunk_steps must be >= 1")

    def check_rates(self, model: ModelSpec):
        """Validate ``mu l1 / 2 - kappa > 0`` and ``0 < kappa~ < mu l1 / 2``."""
        half = model.mu * model.lambda1 / 2
        if self.kappa is not None and not 0 < self.kappa < half:
            raise ValueError(f"kappa must lie in (0, {half:g})")
        if self.kappa_tilde is not None and not 0 < self.kappa_tilde < half:
            raise ValueError(f"kappa_tilde must lie in (0, {half:g})")

    def digest(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


def _noise_active(noise: nz.NoiseSpec) -> bool:
    # drawing depends on the structure of the noise, never on eps, so that
    # runs at different intensities consume identical increments
    return bool(np.any(noise.sigma != 0) or noise.jumps.n_atoms > 0)


def _advance(model: ModelSpec, noise: nz.NoiseSpec, f, u, dt, dw, counts, k):
    """Advance a batch one step; returns ``(u_new, ledger_increments)``."""
    space = model.space
    P = u.shape[0]
    led = np.zeros((P, 6))
    w = u + dt * (f - model.quadratic(u))
    led[:, 0] = 2 * model.mu * spaces.v_norm_sq(space, u) * dt
    led[:, 1] = 2 * (u @ f) * dt
    if dw is not None:
        ut = spaces.retract(u, k)
        if noise.eps1 > 0:
            hd = noise.wiener.diag(ut)
            sw = noise.eps1 * hd * dw
            w = w + sw
            led[:, 2] = noise.eps1**2 * np.einsum("pi,pi->p", hd, hd) * dt
            led[:, 4] = 2 * np.einsum("pi,pi->p", u, sw)
        if noise.eps2 > 0 and noise.jumps.n_atoms:
            gk = noise.jumps.kernel_all(ut)
            jumps = np.einsum("pa,pai->pi", counts, gk) - dt * np.einsum("a,pai->pi", noise.jumps.weights, gk)
            sj = noise.eps2 * jumps
            w = w + sj
            led[:, 3] = noise.eps2**2 * np.einsum("pa,pa->p", counts, np.einsum("pai,pai->pa", gk, gk))
            led[:, 5] = 2 * np.einsum("pi,pi->p", u, sj)
    return spaces.resolvent_step(space, model.mu, dt, w), led


def step(model: ModelSpec, noise: nz.NoiseSpec, forcing: ForcingSpec, u, t: float, dt: float,
         stream: nz.DriverStream | None = None, k: float = math.inf):
    """One scheme step from ``u`` at time ``t``.

    ``h`` and ``G`` see ``retract(u, k)``; ``B`` always sees ``u``.  Raises
    :class:`BlowUpError` if the result is not finite.
    """
    u = model.space.check(u)
    if not dt > 0:
        raise ValueError("dt must be positive")
    dw = counts = None
    if _noise_active(noise):
        if stream is None:
            raise ValueError("a DriverStream is required when noise is present")
        dw = nz.wiener_increment(stream, noise.wiener.rank, dt)[None]
        atoms = nz.jump_atoms(stream, noise.jumps, dt)
        counts = np.bincount(atoms, minlength=noise.jumps.n_atoms)[None]
    with np.errstate(all="ignore"):
        out, _ = _advance(model, noise, np.asarray(forcing(t), float), u[None], dt, dw, counts, k)
    if not np.all(np.isfinite(out)):
        raise BlowUpError(f"non-finite state after step at t={t:g}")
    return out[0]


def _record_steps(n_steps: int, stride: int) -> np.ndarray:
    idx = np.arange(0, n_steps + 1, stride)
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    return idx


def _run_block(model, noise, forcing, u0, t0, n_steps, cfg: SolverConfig, streams,
               keep_states=False, log_jumps=False):
    space = model.space
    u = np.array(u0, dtype=float, copy=True)
    P = u.shape[0]
    dt = cfg.dt
    rec = _record_steps(n_steps, cfg.record_stride)
    n_rec = rec.size
    out = dict(
        h2=np.empty((P, n_rec)), v2=np.empty((P, n_rec)),
        int_v2=np.empty((P, n_rec)), int_hv=np.empty((P, n_rec)),
        ledger=np.empty((P, n_rec, 6)),
    )
    if keep_states:
        out["states"] = np.empty((P, n_rec, space.dim))
    jump_log = np.zeros((P, n_steps), dtype=np.int64) if log_jumps else None
    cum = np.zeros((P, 6))
    iv2 = np.zeros(P)
    ihv = np.zeros(P)
    blowup = np.full(P, np.nan)
    alive = np.ones(P, dtype=bool)
    k = np.full(P, float(cfg.truncation_radius))
    armed = np.ones(P, dtype=bool)
    events = [[] for _ in range(P)]
    active = _noise_active(noise)

    h2 = spaces.h_norm_sq(space, u)
    v2 = spaces.v_norm_sq(space, u)

    def record(j):
        out["h2"][:, j] = h2
        out["v2"][:, j] = v2
        out["int_v2"][:, j] = iv2
        out["int_hv"][:, j] = ihv
        out["ledger"][:, j] = cum
        if keep_states:
            out["states"][:, j] = u

    record(0)
    j = 1
    n = 0
    with np.errstate(all="ignore"):
        while n < n_steps:
            S = min(cfg.chunk_steps, n_steps - n)
            if active:
                dw, counts = nz.draw_block(streams, noise, dt, S)
            for s in range(S):
                t = t0 + n * dt
                f = np.asarray(forcing(t), dtype=float)
                if active:
                    u, led = _advance(model, noise, f, u, dt, dw[:, s], counts[:, s], k)
                    if log_jumps:
                        jump_log[:, n] = counts[:, s].sum(axis=1)
                else:
                    u, led = _advance(model, noise, f, u, dt, None, None, k)
                cum = cum + led
                n += 1
                h2 = spaces.h_norm_sq(space, u)
                v2 = spaces.v_norm_sq(space, u)
                # post-step (implicit) quadrature, matching the implicit treatment of A
                iv2 = iv2 + v2 * dt
                ihv = ihv + h2 * v2 * dt
                bad = alive & ~np.isfinite(v2)
                if np.any(bad):
                    blowup[bad] = t0 + n * dt
                    alive &= ~bad
                    u[bad] = np.nan
                hn = np.sqrt(h2)
                cross = alive & armed & (hn > k)
                if np.any(cross):
                    tn = t0 + n * dt
                    for p in np.nonzero(cross)[0]:
                        if cfg.escalate_truncation:
                            while hn[p] > k[p]:
                                events[p].append((float(k[p]), tn))
                                k[p] *= 2
                        else:
                            events[p].append((float(k[p]), tn))
                            armed[p] = False
                if j < n_rec and n == rec[j]:
                    record(j)
                    j += 1
    out["final"] = u
    out["blowup"] = blowup
    out["events"] = events
    out["jumps"] = jump_log
    out["times"] = t0 + rec * dt
    return out


@dataclass
class PathRecord:
    times: np.ndarray
    states: np.ndarray
    ledger: np.ndarray
    stopping_events: list
    blowup_time: float = math.nan
    jump_counts: np.ndarray | None = None
    int_v2: np.ndarray | None = None
    int_hv: np.ndarray | None = None

    @property
    def blew_up(self) -> bool:
        return not math.isnan(self.blowup_time)

    @property
    def ledger_increments(self) -> np.ndarray:
        return np.diff(self.ledger, axis=0, prepend=self.ledger[:1])

    def h_norm_sq(self) -> np.ndarray:
        return np.einsum("ni,ni->n", self.states, self.states)


@dataclass
class EnsembleRecord:
    times: np.ndarray
    initial_states: np.ndarray
    final_states: np.ndarray
    h2: np.ndarray
    v2: np.ndarray
    int_v2: np.ndarray
    int_hv: np.ndarray
    ledger: np.ndarray
    blowup_time: np.ndarray
    stopping_events: list
    master_seed: int
    config_hash: str
    states: np.ndarray | None = None
    model: ModelSpec | None = field(default=None, repr=False)
    noise: nz.NoiseSpec | None = field(default=None, repr=False)
    forcing: ForcingSpec | None = field(default=None, repr=False)
    cfg: SolverConfig | None = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.final_states.shape[0]

    @property
    def n_blowups(self) -> int:
        return int(np.sum(~np.isnan(self.blowup_time)))

    def index_at(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the record grid")
        return i


def simulate_path(model: ModelSpec, noise: nz.NoiseSpec, forcing: ForcingSpec, u0, tau: float,
                  T: float, cfg: SolverConfig, stream: nz.DriverStream | None = None) -> PathRecord:
    """Grid-sampled path on ``[tau, tau + T]`` with ledger and stopping events."""
    if not T > 0:
        raise ValueError("T must be positive")
    u0 = model.space.check(u0)
    if stream is None:
        stream = nz.DriverStream(0, 0)
    n_steps = int(round(T / cfg.dt))
    out = _run_block(model, noise, forcing, u0[None], tau, n_steps, cfg, [stream],
                     keep_states=True, log_jumps=True)
    return PathRecord(out["times"], out["states"][0], out["ledger"][0], out["events"][0],
                      float(out["blowup"][0]), out["jumps"][0], out["int_v2"][0], out["int_hv"][0])


def run_ensemble(model: ModelSpec, noise: nz.NoiseSpec, forcing: ForcingSpec, init_states,
                 t0: float, T: float, cfg: SolverConfig, master_seed: int = 0, workers: int = 1,
                 keep_states: bool = False, path_offset: int = 0) -> EnsembleRecord:
    """Simulate ``len(init_states)`` paths on ``[t0, t0 + T]``.

    Path ``i`` uses ``DriverStream(master_seed, path_offset + i)``.
    """
    init = np.atleast_2d(model.space.check(init_states))
    P = init.shape[0]
    n_steps = int(round(T / cfg.dt))
    if n_steps < 1:
        raise ValueError("T must cover at least one step")
    bs = cfg.block_size
    blocks = [(s, min(s + bs, P)) for s in range(0, P, bs)]

    def work(b):
        lo, hi = b
        streams = [nz.DriverStream(master_seed, path_offset + i) for i in range(lo, hi)]
        return _run_block(model, noise, forcing, init[lo:hi], t0, n_steps, cfg, streams, keep_states)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]

    def cat(key):
        return np.concatenate([p[key] for p in parts], axis=0)

    events = [e for p in parts for e in p["events"]]
    digest = hashlib.sha256((cfg.digest() + repr((model.kind, model.params, model.mu, noise.family,
                                                   noise.eps1, noise.eps2, t0, T, P))).encode())
    return EnsembleRecord(parts[0]["times"], init.copy(), cat("final"), cat("h2"), cat("v2"),
                          cat("int_v2"), cat("int_hv"), cat("ledger"), cat("blowup"), events,
                          int(master_seed), digest.hexdigest()[:16],
                          cat("states") if keep_states else None, model, noise, forcing, cfg)


def sample_initial(init_sampler, n_paths: int, master_seed: int, dim: int) -> np.ndarray:
    """Draw initial states from a separate seeded stream (independent of the noise streams)."""
    if init_sampler is None:
        return np.zeros((n_paths, dim))
    if not callable(init_sampler):
        return np.broadcast_to(np.asarray(init_sampler, float), (n_paths, dim)).copy()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(master_seed) & (2**64 - 1), 2**32 - 1])))
    return np.asarray(init_sampler(rng, n_paths), dtype=float).reshape(n_paths, dim)


def pullback_ensemble(model: ModelSpec, noise: nz.NoiseSpec, forcing: ForcingSpec, init_sampler,
                      tau: float, t: float, n_paths: int, cfg: SolverConfig, master_seed: int = 0,
                      workers: int = 1, keep_states: bool = False) -> EnsembleRecord:
    """Ensemble of ``u(s, tau - t, u_{tau-t})`` for ``s`` in ``[tau - t, tau]``.

    ``init_sampler(rng, n)`` returns ``n`` initial states (or pass a fixed
    state, or ``None`` for zero).
    """
    if not t > 0:
        raise ValueError("t must be positive")
    init = sample_initial(init_sampler, n_paths, master_seed, model.dim)
    return run_ensemble(model, noise, forcing, init, tau - t, t, cfg, master_seed, workers, keep_states)


# -- diagnostics ---------------------------------------------------------------

def energy_residual(record) -> np.ndarray:
    """Cumulative defect of the discrete energy balance at every record point.

    ``r_m = |u_m|^2 - |u_0|^2 - sum_{n<m} (-D + F + QW + QJ + MW + MJ)``.
    Returns shape ``(n_rec,)`` for a path, ``(P, n_rec)`` for an ensemble.
    """
    if isinstance(record, PathRecord):
        h2 = record.h_norm_sq()
        bal = record.ledger @ _LEDGER_SIGN
        return h2 - h2[0] - bal
    bal = record.ledger @ _LEDGER_SIGN
    return record.h2 - record.h2[:, :1] - bal


def stopping_profile(record, k_ladder) -> list:
    """First grid time with ``|u|_H > k`` for each ``k`` (``None`` if never)."""
    ks = np.asarray(k_ladder, dtype=float)
    if np.any(np.diff(ks) <= 0):
        raise ValueError("k ladder must be increasing")
    hn = np.sqrt(record.h_norm_sq()) if isinstance(record, PathRecord) else np.sqrt(record)
    times = record.times
    out = []
    for k in ks:
        hit = np.nonzero(hn > k)[0]
        out.append(float(times[hit[0]]) if hit.size else None)
    return out


def mean_se(x) -> tuple:
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    m = float(np.mean(x, axis=0))
    se = float(np.std(x, axis=0, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return m, se


def rho_constants(mu: float, lambda1: float, kappa: float | None = None,
                  kappa_tilde: float | None = None, f_dual_sq: float | None = None) -> dict:
    """Explicit constants of the absorbing and moment estimates."""
    ml = mu * lambda1
    rho = dict(rho0=max((2 + ml) / 2, 2 / mu))
    if kappa is not None and f_dual_sq is not None:
        rho["rho1"] = (2 * kappa + 2) / (kappa * min(2.0, mu)) * ((2 / mu) * f_dual_sq + ml / 2)
    if kappa_tilde is not None:
        kt = kappa_tilde
        r2 = math.exp(kt) / min(1.0, mu / 2) * max(1.0, 2 / ml, ml * math.sqrt(kt) / (2 * kt))
        r3 = max(1.0, 216 / (mu**3 * lambda1**3), ml / (8 * kt)) / min(1.0, 2 * mu)
        r4 = max(r2 + 2 * math.exp(kt) / (mu * math.sqrt(kt)), r2 + ml / 2)
        rho.update(rho2=r2, rho3=r3, rho4=r4, rho5=2 * r3)
    return rho


def absorbing_radius(model: ModelSpec, forcing: ForcingSpec, kappa: float, tau: float) -> float:
    """``R(tau) = rho0 + rho0 int_{-inf}^{tau} e^{kappa (s - tau)} |f|_{V'}^2 ds``."""
    rho0 = rho_constants(model.mu, model.lambda1)["rho0"]
    return rho0 + rho0 * forcing_weighted_integral(model.space, forcing, kappa, tau, "2_dualV")


def p4_absorbing_radius(model: ModelSpec, forcing: ForcingSpec, kappa_tilde: float, tau: float) -> float:
    """``M(tau)^(1/4)`` with ``M = rho5 + rho5 int e^{-kt (tau - s)} |f|_H^4 ds``."""
    r5 = rho_constants(model.mu, model.lambda1, kappa_tilde=kappa_tilde)["rho5"]
    return (r5 + r5 * forcing_weighted_integral(model.space, forcing, kappa_tilde, tau, "4_H")) ** 0.25


def _weighted_segments(times, cumulative, rate, t_end, start=0):
    # int e^{rate (s - t_end)} g(s) ds from cumulative int g, midpoint weight per segment
    c = cumulative[..., start:]
    tt = times[start:]
    mid = 0.5 * (tt[1:] + tt[:-1])
    return np.diff(c, axis=-1) @ np.exp(rate * (mid - t_end))


def weight_exponent(model: ModelSpec) -> float:
    """``27 c0^2 / (2 mu^3)`` with the B4 constant."""
    if model.certified_c0_B4 is None:
        raise nz.MissingCertificateError("weighted diagnostics need the B4 constant")
    return 27 * model.certified_c0_B4**2 / (2 * model.mu**3)


@dataclass
class DiagnosticTable:
    which: str
    rows: list
    n_paths: int
    n_blowups: int = 0

    @property
    def passed(self) -> bool:
        return self.n_blowups == 0 and all(r["passed"] for r in self.rows)

    def to_dict(self) -> dict:
        return dict(which=self.which, rows=self.rows, n_paths=self.n_paths,
                    n_blowups=self.n_blowups, passed=self.passed)


def moment_diagnostics(ens: EnsembleRecord, which: str, times=None) -> DiagnosticTable:
    """Monte Carlo estimates against the a priori bounds.

    ``m2``: ``E|u(t)|^2 + (mu/2) int e^{kappa(s-t)} E|u|_V^2`` against
    ``e^{-kappa(t-t0)} E|u0|^2 + (2/mu) int_{t0}^t e^{kappa(s-t)} |f|_{V'}^2 + mu l1 / (2 kappa)``.
    ``v_integral``: ``int_{t0}^t E|u|_V^2`` against ``E|u0|^2 + rho1 (t - t0)`` (constant f).
    ``m4``: ``E|u|^4 + int e^{-kt(t-s)} E[|u|^2 |u|_V^2]`` against the rho3 bound.
    ``weighted_v``: ``E[P |u(t)|_V^2]`` against the rho4 bound.

    A row passes when the one-sided 95% upper confidence limit of the
    estimate is at most the bound.
    """
    model, forcing, cfg = ens.model, ens.forcing, ens.cfg
    if model is None or forcing is None or cfg is None:
        raise ValueError("ensemble lacks model/forcing/config references")
    mu, l1 = model.mu, model.lambda1
    space = model.space
    t0 = float(ens.times[0])
    idx = [len(ens.times) - 1] if times is None else [ens.index_at(t) for t in times]
    h0 = spaces.h_norm_sq(space, ens.initial_states)
    rows = []
    for i in idx:
        t = float(ens.times[i])
        el = t - t0
        if which == "m2":
            kap = cfg.kappa
            lhs = ens.h2[:, i] + 0.5 * mu * _weighted_segments(ens.times[:i + 1], ens.int_v2[:, :i + 1], kap, t)
            ff = (forcing_weighted_integral(space, forcing, kap, t, "2_dualV")
                  - math.exp(-kap * el) * forcing_weighted_integral(space, forcing, kap, t0, "2_dualV"))
            bound = math.exp(-kap * el) * float(np.mean(h0)) + (2 / mu) * ff + mu * l1 / (2 * kap)
        elif which == "v_integral":
            if not forcing.autonomous:
                raise ValueError("v_integral bound needs constant forcing")
            r1 = rho_constants(mu, l1, kappa=cfg.kappa, f_dual_sq=float(spaces.dual_norm_sq(space, forcing.f_inf)))["rho1"]
            lhs = ens.int_v2[:, i]
            bound = float(np.mean(h0)) + r1 * el
        elif which == "m4":
            kt = cfg.kappa_tilde
            r3 = rho_constants(mu, l1, kappa_tilde=kt)["rho3"]
            lhs = ens.h2[:, i] ** 2 + _weighted_segments(ens.times[:i + 1], ens.int_hv[:, :i + 1], kt, t)
            bound = (r3 * math.exp(-kt * el) * float(np.mean(h0**2))
                     + r3 * forcing_weighted_integral(space, forcing, kt, t, "4_H") + r3)
        elif which == "weighted_v":
            kt = cfg.kappa_tilde
            r4 = rho_constants(mu, l1, kappa_tilde=kt)["rho4"]
            lhs = np.exp(-weight_exponent(model) * ens.int_hv[:, i]) * ens.v2[:, i]
            bound = (r4 * math.exp(-kt * el) * float(np.mean(h0))
                     + r4 * math.sqrt(forcing_weighted_integral(space, forcing, kt, t, "4_H")) + r4)
        else:
            raise ValueError(f"unknown diagnostic {which!r}")
        m, se = mean_se(lhs)
        upper = m + Z95 * se
        rows.append(dict(quantity=which, time=t, elapsed=el, estimate=m, se=se, upper=upper,
                         bound=float(bound), passed=bool(upper <= bound)))
    return DiagnosticTable(which, rows, ens.n_paths, ens.n_blowups)

"""Measure-level experiments: occupation measures, push-forwards, sweeps, tails, autonomy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .. import noise as nz
from .. import solver
from ..models import ForcingSpec, ModelSpec, autonomy_integral
from ..solver import EnsembleRecord, PathRecord, SolverConfig, Z95, mean_se
from .empirical import EmpiricalMeasure
from .metric import dp_metric

Z975 = 1.959963984540054


def nonincreasing_within_ci(values, cis) -> bool:
    """``v[i+1] <= v[i] + sqrt(ci[i]^2 + ci[i+1]^2)`` for consecutive entries."""
    v = np.asarray(values, float)
    c = np.asarray(cis, float)
    return bool(np.all(v[1:] <= v[:-1] + np.hypot(c[1:], c[:-1])))


# -- occupation measures ----------------------------------------------------

def _window_states(record, window, thinning):
    t0, t1 = window
    if not t1 > t0:
        raise ValueError("window must have t1 > t0")
    times = record.times
    tol = 1e-9 * max(1.0, abs(t0), abs(t1))
    idx = np.nonzero((times >= t0 - tol) & (times < t1 - tol))[0][::thinning]
    if idx.size == 0:
        raise ValueError("empty occupation window")
    if isinstance(record, PathRecord):
        return record.states[idx][None]
    if record.states is None:
        raise ValueError("ensemble was run without keep_states")
    return record.states[:, idx]


def occupation_measure(record, window, thinning: int = 1, max_atoms: int | None = None,
                       merge: bool = True) -> EmpiricalMeasure:
    """Time average over ``[t0, t1)`` of the recorded states (pooled over paths).

    With ``max_atoms`` the pooled atoms are thinned to at most that many,
    evenly spaced in path-major order.
    """
    x = _window_states(record, window, thinning).reshape(-1, record.states.shape[-1])
    if max_atoms is not None and x.shape[0] > max_atoms:
        x = x[np.linspace(0, x.shape[0] - 1, max_atoms).round().astype(int)]
    return EmpiricalMeasure.from_samples(x, merge=merge)


def _dp_with_bootstrap(xa, xb, max_atoms, n_boot, seed):
    """d_P between pooled states of two ensembles ``(P, n_t, dim)``; CI by path bootstrap."""
    P, nt, dim = xa.shape
    per_path = max(1, max_atoms // P) if P <= max_atoms else 1
    tsel = np.linspace(0, nt - 1, min(per_path, nt)).round().astype(int)
    psel = np.arange(P) if P <= max_atoms else np.linspace(0, P - 1, max_atoms).round().astype(int)

    def dist(paths):
        a = xa[paths][:, tsel].reshape(-1, dim)
        b = xb[paths][:, tsel].reshape(-1, dim)
        return dp_metric(EmpiricalMeasure.from_samples(a), EmpiricalMeasure.from_samples(b))

    d = dist(psel)
    if n_boot < 2:
        return d, math.nan
    rng = np.random.default_rng(seed)
    boots = [dist(np.sort(rng.choice(psel, psel.size, replace=True))) for _ in range(n_boot)]
    return d, Z975 * float(np.std(boots, ddof=1))


# -- transition of measures -------------------------------------------------

def _push_states(mu, t, tau, model, noise, forcing, paths_per_atom, cfg, master_seed, workers, path_offset=0):
    init = np.repeat(mu.support, paths_per_atom, axis=0)
    ens = solver.run_ensemble(model, noise, forcing, init, tau, t, cfg, master_seed, workers,
                              path_offset=path_offset)
    if ens.n_blowups:
        raise solver.BlowUpError(f"{ens.n_blowups} paths blew up during push-forward")
    return init, ens.final_states


def pushforward(mu: EmpiricalMeasure, t: float, tau: float, model: ModelSpec, noise: nz.NoiseSpec,
                forcing: ForcingSpec, paths_per_atom: int, cfg: SolverConfig, master_seed: int = 0,
                workers: int = 1, path_offset: int = 0) -> EmpiricalMeasure:
    """Monte Carlo ``Psi(t, tau) mu``: every atom is propagated ``paths_per_atom`` times."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return mu
    _, end = _push_states(mu, t, tau, model, noise, forcing, paths_per_atom, cfg, master_seed,
                          workers, path_offset)
    w = np.repeat(mu.weights, paths_per_atom) / paths_per_atom
    return EmpiricalMeasure(end, w / w.sum())


def ramp_family(dim: int, n: int = 64, seed: int = 0):
    """Directions ``W`` and amplitudes ``c`` of ``x -> c ramp(<x, w> / (1 + |w|))``.

    ``ramp`` clips to ``[-1, 1]``; ``c = 1 / (1 + |w| / (1 + |w|))`` makes
    ``sup|phi| + Lip(phi) = 1``.
    """
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    W = g * np.exp(rng.uniform(math.log(0.3), math.log(30.0), size=(n, 1)))
    nw = np.linalg.norm(W, axis=1)
    c = 1.0 / (1.0 + nw / (1.0 + nw))
    return W, c


def evaluate_family(x, family):
    W, c = family
    nw = np.linalg.norm(W, axis=1)
    return c * np.clip((x @ W.T) / (1.0 + nw), -1.0, 1.0)


@dataclass
class InvarianceResult:
    residual: float
    ci: float
    diffs: np.ndarray
    ses: np.ndarray
    control: float

    def to_dict(self) -> dict:
        return dict(residual=self.residual, ci=self.ci, control=self.control,
                    diffs=self.diffs.tolist(), ses=self.ses.tolist())


def invariance_residual(mu: EmpiricalMeasure, t: float, model: ModelSpec, noise: nz.NoiseSpec,
                        forcing: ForcingSpec, cfg: SolverConfig, family=None, paths_per_atom: int = 1,
                        master_seed: int = 0, workers: int = 1) -> InvarianceResult:
    """``max_phi |int p_t phi dmu - int phi dmu|`` over the ramp family.

    Uses paired differences ``phi(X_t^x) - phi(x)``; ``ci`` is 1.96 times the
    largest per-function standard error.  The constant function is the
    built-in control and must give exactly 0.
    """
    if not forcing.autonomous:
        raise ValueError("invariance residual needs an autonomous system (constant forcing)")
    if family is None:
        family = ramp_family(mu.dim)
    nf = family[0].shape[0]
    if t == 0:
        return InvarianceResult(0.0, 0.0, np.zeros(nf), np.zeros(nf), 0.0)
    start, end = _push_states(mu, t, 0.0, model, noise, forcing, paths_per_atom, cfg, master_seed, workers)
    w = np.repeat(mu.weights, paths_per_atom) / paths_per_atom
    w = w / w.sum()
    d = evaluate_family(end, family) - evaluate_family(start, family)
    mean = w @ d
    ses = np.sqrt(np.sum((w[:, None] ** 2) * (d - mean) ** 2, axis=0) * w.size / max(w.size - 1, 1))
    # constant test function through the same paired path: p_t c = c, so it must vanish,
    # and the pair weights must be a probability vector
    half = np.full((end.shape[0], 1), 0.5)
    d_const = half - np.full((start.shape[0], 1), 0.5)
    control = float(abs(w @ d_const[:, 0]) + abs(w.sum() - 1.0))
    return InvarianceResult(float(np.max(np.abs(mean))), Z975 * float(np.max(ses)), mean, ses, control)


# -- intensity sweeps -------------------------------------------------------

@dataclass
class SweepTable:
    eps_hat: tuple
    rows: list
    slope: float
    slope_intercept: float
    dp_monotone: bool

    def to_dict(self) -> dict:
        return dict(eps_hat=list(self.eps_hat), rows=self.rows, slope=self.slope,
                    slope_intercept=self.slope_intercept, dp_monotone=self.dp_monotone)


def _sup_diff_sq(a: EnsembleRecord, b: EnsembleRecord):
    d = a.states - b.states
    return np.max(np.einsum("ptd,ptd->pt", d, d), axis=1)


def intensity_sweep(model: ModelSpec, noise: nz.NoiseSpec, forcing: ForcingSpec, init_states, T: float,
                    cfg: SolverConfig, eps_hat, ladder, window=None, master_seed: int = 0,
                    workers: int = 1, dp_atoms: int = 200, n_boot: int = 10) -> SweepTable:
    """Coupled runs at each ``(eps1, eps2)`` of the ladder against ``eps_hat``.

    Every run uses the same DriverStreams and initial states, so only the
    intensity differs.  Reports ``E sup_t |u^eps - u^hat|^2`` (sup over the
    record grid) and d_P between occupation measures over ``window``
    (default ``[T/2, T)``).
    """
    e1h, e2h = eps_hat
    t0 = 0.0
    window = (T / 2, T) if window is None else window

    def run(e1, e2):
        return solver.run_ensemble(model, noise.with_intensities(e1, e2), forcing, init_states, t0, T, cfg,
                                   master_seed, workers, keep_states=True)

    ref = run(e1h, e2h)
    rows = []
    for j, (e1, e2) in enumerate(ladder):
        ens = run(e1, e2)
        if ens.n_blowups or ref.n_blowups:
            raise solver.BlowUpError("blow-up inside intensity sweep")
        sd = _sup_diff_sq(ens, ref)
        m, se = mean_se(sd)
        xa = _window_states(ens, window, 1)
        xb = _window_states(ref, window, 1)
        dp, dp_ci = _dp_with_bootstrap(xa, xb, dp_atoms, n_boot, seed=master_seed + j)
        rows.append(dict(eps1=float(e1), eps2=float(e2), delta=float(math.hypot(e1 - e1h, e2 - e2h)),
                         sup_diff2=m, sup_diff2_se=se, sup_diff2_ci=Z975 * se, dp=dp, dp_ci=dp_ci))
    deltas = np.array([r["delta"] for r in rows])
    vals = np.array([r["sup_diff2"] for r in rows])
    ok = (deltas > 0) & (vals > 0)
    if ok.sum() >= 2:
        slope, icpt = np.polyfit(np.log(deltas[ok]), np.log(vals[ok]), 1)
    else:
        slope, icpt = math.nan, math.nan
    mono = nonincreasing_within_ci([r["dp"] for r in rows], [r["dp_ci"] for r in rows])
    return SweepTable((float(e1h), float(e2h)), rows, float(slope), float(icpt), mono)


# -- V-norm tail ---------------------------------------------------------------

@dataclass
class TailReport:
    rows: list
    M1: float
    M2: float
    window: float

    @property
    def passed(self) -> bool:
        return all(r["passed"] for r in self.rows)

    def to_dict(self) -> dict:
        return dict(rows=self.rows, M1=self.M1, M2=self.M2, window=self.window, passed=self.passed)


def tail_constants(ens: EnsembleRecord, window: float = 2.0):
    """Upper confidence limits of ``E[P(tau, tau-w) |u(tau)|_V^2]`` and ``int E[|u|^2 |u|_V^2]``."""
    tau = float(ens.times[-1])
    i0 = ens.index_at(tau - window)
    acc = ens.int_hv[:, -1] - ens.int_hv[:, i0]
    weight = np.exp(-solver.weight_exponent(ens.model) * acc)
    m1, s1 = mean_se(weight * ens.v2[:, -1])
    m2, s2 = mean_se(acc)
    return m1 + Z95 * s1, m2 + Z95 * s2


def v_tail_check(ens: EnsembleRecord, R_ladder, M1: float | None = None, M2: float | None = None,
                 window: float = 2.0) -> TailReport:
    """Empirical ``P(|u(tau)|_V > R)`` against ``M1 / R + 27 c0^2 M2 / (2 mu^3 ln R)``.

    ``M1``/``M2`` default to the one-sided 95% upper limits estimated from the
    ensemble over ``[tau - window, tau]``.  The tail passes when its
    Clopper-Pearson 95% upper limit is at most the bound; ``tail_lower`` is
    the matching 5% lower limit.
    """
    Rs = np.asarray(R_ladder, dtype=float)
    if np.any(Rs <= 1):
        raise ValueError("R must exceed 1 (ln R > 0)")
    if M1 is None or M2 is None:
        e1, e2 = tail_constants(ens, window)
        M1 = e1 if M1 is None else M1
        M2 = e2 if M2 is None else M2
    coef = solver.weight_exponent(ens.model)
    vn = np.sqrt(ens.v2[:, -1])
    n = vn.size
    rows = []
    for R in Rs:
        k = int(np.sum(vn > R))
        upper = 1.0 if k == n else float(stats.beta.ppf(0.95, k + 1, n - k))
        lower = 0.0 if k == 0 else float(stats.beta.ppf(0.05, k, n - k + 1))
        bound = M1 / R + coef * M2 / math.log(R)
        rows.append(dict(R=float(R), tail=k / n, tail_lower=lower, tail_upper=upper, bound=float(bound),
                         passed=bool(upper <= bound)))
    return TailReport(rows, float(M1), float(M2), window)


# -- asymptotic autonomy -----------------------------------------------------

@dataclass
class AutonomyReport:
    rows: list
    trend_nonincreasing: bool
    C_ratios: list
    C_stable: bool

    @property
    def passed(self) -> bool:
        return self.trend_nonincreasing and self.C_stable

    def to_dict(self) -> dict:
        return dict(rows=self.rows, trend_nonincreasing=self.trend_nonincreasing,
                    C_ratios=self.C_ratios, C_stable=self.C_stable, passed=self.passed)


def asymptotic_autonomy(model: ModelSpec, noise: nz.NoiseSpec, forcing: ForcingSpec, tau_ladder,
                        t_pullback: float, cfg: SolverConfig, n_paths: int, init_sampler=None,
                        window: float = 1.0, coupled_T: float = 1.0, master_seed: int = 0,
                        workers: int = 1, dp_atoms: int = 200, n_boot: int = 10,
                        stable_factor: float = 1.5) -> AutonomyReport:
    """Pullback occupation measures under ``f(t)`` against the autonomous system with ``f_inf``.

    For each ``tau`` the non-autonomous and autonomous ensembles start from
    the same states at ``tau - t_pullback`` with the same DriverStreams; d_P
    compares their occupation measures on ``[tau - window, tau)``.  The
    coupled difference ``E sup_{t<=T} |u(t+tau, tau, x) - v(t, x)|^2`` is
    divided by ``int_{-inf}^{T+tau} |f - f_inf|^2`` to give ``C(tau)``;
    ``C_stable`` requires consecutive ratios within ``stable_factor``.
    """
    taus = [float(t) for t in tau_ladder]
    auto = ForcingSpec.constant(forcing.f_inf)
    for tau in taus:
        autonomy_integral(forcing, tau + coupled_T)  # raises DivergentIntegralError
    init = solver.sample_initial(init_sampler, n_paths, master_seed, model.dim)
    v_ref = solver.run_ensemble(model, noise, auto, init, 0.0, coupled_T, cfg, master_seed, workers,
                                keep_states=True)
    rows = []
    for j, tau in enumerate(taus):
        start = tau - t_pullback
        a = solver.run_ensemble(model, noise, forcing, init, start, t_pullback, cfg, master_seed, workers,
                                keep_states=True)
        b = solver.run_ensemble(model, noise, auto, init, start, t_pullback, cfg, master_seed, workers,
                                keep_states=True)
        win = (tau - window, tau)
        dp, dp_ci = _dp_with_bootstrap(_window_states(a, win, 1), _window_states(b, win, 1),
                                       dp_atoms, n_boot, seed=master_seed + 1000 + j)
        u = solver.run_ensemble(model, noise, forcing, init, tau, coupled_T, cfg, master_seed, workers,
                                keep_states=True)
        if a.n_blowups or b.n_blowups or u.n_blowups or v_ref.n_blowups:
            raise solver.BlowUpError("blow-up inside autonomy study")
        sd = _sup_diff_sq(u, v_ref)
        m, se = mean_se(sd)
        integral = autonomy_integral(forcing, tau + coupled_T)
        rows.append(dict(tau=tau, dp=dp, dp_ci=dp_ci, sup_diff2=m, sup_diff2_se=se,
                         integral=integral, C=m / integral if integral > 0 else math.nan))
    trend = nonincreasing_within_ci([r["dp"] for r in rows], [r["dp_ci"] for r in rows])
    Cs = [r["C"] for r in rows]
    ratios = [Cs[i + 1] / Cs[i] for i in range(len(Cs) - 1)]
    stable = bool(all(1 / stable_factor <= q <= stable_factor for q in ratios))
    return AutonomyReport(rows, trend, ratios, stable)

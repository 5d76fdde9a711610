"""Subcommand bodies.  Each returns a :class:`Outcome`; the driver writes the files.

``prepare_*`` functions only validate (raising :class:`ConfigError`) so that
a bad configuration is rejected before any output directory exists.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import models, solver, spaces
from .. import noise as nz
from ..measures import dynamics
from .config import Built, ConfigError

log = logging.getLogger("hydrolevy")

# exit codes
OK, CONFIG_ERROR, BLOWUP, ESTIMATE_FAILURE = 0, 2, 3, 4


@dataclass
class Outcome:
    """Tables (name -> (header, rows)), a JSON-able report, and a status."""

    tables: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    plots: dict = field(default_factory=dict)
    blowups: int = 0

    @property
    def passed(self) -> bool:
        return all(v for v in self.checks.values() if v is not None)

    @property
    def exit_code(self) -> int:
        if self.blowups:
            return BLOWUP
        return OK if self.passed else ESTIMATE_FAILURE


def _series(rows, name, x, y, ci=None):
    ci = np.zeros(len(y)) if ci is None else np.asarray(ci, float)
    for xi, yi, ci_i in zip(x, y, ci):
        rows.append((name, float(xi), float(yi), float(yi - ci_i), float(yi + ci_i)))


def eps_status(b: Built) -> dict:
    """Compare the configured intensities with the threshold formulas; warn when above."""
    if b.noise.family == "none" or not (np.any(b.noise.sigma) or b.noise.jumps.n_atoms):
        return dict(eps1=b.noise.eps1, eps2=b.noise.eps2, eps0=None, within=True)
    try:
        th = nz.eps0_thresholds(b.model, b.noise)
    except nz.MissingCertificateError as exc:
        raise ConfigError(str(exc)) from exc
    within = max(b.noise.eps1, b.noise.eps2) <= th["overall"]
    if not within:
        log.warning("eps1=%g, eps2=%g exceed eps0=%g: estimate checks will be skipped",
                    b.noise.eps1, b.noise.eps2, th["overall"])
    return dict(eps1=b.noise.eps1, eps2=b.noise.eps2, eps0=th, within=within)


def _initial(b: Built, seed: int) -> np.ndarray:
    return solver.sample_initial(b.init, b.cfg.experiment.n_paths, seed, b.model.dim)


def _check_blowups(*ens) -> int:
    return int(sum(e.n_blowups for e in ens))


# -- simulate ---------------------------------------------------------------

def prepare_simulate(b: Built):
    pass


def run_simulate(b: Built, seed: int, workers: int) -> Outcome:
    sb = b.cfg.solver
    init = _initial(b, seed)
    keep = b.cfg.experiment.simulate.save_states
    ens = solver.run_ensemble(b.model, b.noise, b.forcing, init, sb.tau, sb.T, b.solver, seed, workers,
                              keep_states=keep)
    out = Outcome(blowups=ens.n_blowups)
    ok = np.isnan(ens.blowup_time)  # paths that stayed finite
    h2, v2, led = ens.h2[ok], ens.v2[ok], ens.ledger[ok]
    n = max(int(ok.sum()), 1)
    res = np.abs(solver.energy_residual(ens)[ok]) if ok.any() else np.zeros((1, len(ens.times)))
    rows = []
    for i, t in enumerate(ens.times):
        mh, sh = solver.mean_se(h2[:, i]) if ok.sum() > 1 else (math.nan, math.nan)
        mv, sv = solver.mean_se(v2[:, i]) if ok.sum() > 1 else (math.nan, math.nan)
        lm = led[:, i].mean(axis=0) if ok.any() else np.full(len(solver.LEDGER_FIELDS), math.nan)
        rows.append([t, mh, sh, mv, sv, *lm, float(res[:, i].max())])
    out.tables["energy"] = (["t", "mean_h2", "se_h2", "mean_v2", "se_v2",
                             *[f"mean_{f}" for f in solver.LEDGER_FIELDS], "max_abs_residual"], rows)
    out.tables["paths"] = (["path", "blowup_time", "final_h2", "final_v2",
                            *[f"final_{f}" for f in solver.LEDGER_FIELDS]],
                           [[p, ens.blowup_time[p], ens.h2[p, -1], ens.v2[p, -1], *ens.ledger[p, -1]]
                            for p in range(ens.n_paths)])
    out.tables["final_states"] = (["path", *[f"u{j}" for j in range(b.model.dim)]],
                                  [[p, *ens.final_states[p]] for p in range(ens.n_paths)])
    if keep:
        out.tables["states"] = (["path", "t", *[f"u{j}" for j in range(b.model.dim)]],
                                [[p, t, *ens.states[p, i]] for p in range(ens.n_paths)
                                 for i, t in enumerate(ens.times)])
    mart = {}
    for name in ("wiener_mart", "jump_mart"):
        j = solver.LEDGER_FIELDS.index(name)
        if ok.sum() > 1:
            m, se = solver.mean_se(led[:, -1, j])
            mart[name] = dict(mean=m, se=se, z=(m / se if se > 0 else 0.0))
    out.report = dict(n_paths=ens.n_paths, n_blowups=ens.n_blowups, n_finite=n,
                      max_abs_energy_residual=float(res.max()), martingales=mart)
    plots = []
    if ok.sum() > 1:
        _series(plots, "mean_h2", ens.times, h2.mean(0), dynamics.Z975 * h2.std(0, ddof=1) / math.sqrt(n))
        _series(plots, "mean_v2", ens.times, v2.mean(0), dynamics.Z975 * v2.std(0, ddof=1) / math.sqrt(n))
    out.plots["energy_decay"] = plots
    return out


# -- verify-hypotheses --------------------------------------------------------

def prepare_verify(b: Built):
    pass


def run_verify(b: Built, seed: int, workers: int) -> Outcome:
    vb = b.cfg.experiment.verify
    out = Outcome()
    hyp = models.verify_hypotheses(b.model, vb.samples, rng_seed=seed)
    rows = [["skew_defect", hyp.skew_defect, hyp.tolerance, hyp.skew_defect <= hyp.tolerance],
            ["energy_defect", hyp.energy_defect, hyp.tolerance, hyp.energy_defect <= hyp.tolerance],
            ["bilinearity_defect", hyp.bilinearity_defect, 1e-9, hyp.bilinearity_defect <= 1e-9],
            ["poincare_defect", hyp.poincare_defect, 1e-12, hyp.poincare_defect <= 1e-12],
            ["C_B3_estimate", hyp.C_B3_estimate, hyp.certified_C_B3, hyp.C_B3_estimate <= hyp.certified_C_B3]]
    if hyp.certified_c0_B4 is not None:
        rows.append(["c0_B4_estimate", hyp.c0_B4_estimate, hyp.certified_c0_B4,
                     hyp.c0_B4_estimate <= hyp.certified_c0_B4])
    out.checks["hypotheses"] = hyp.passed
    out.report["hypotheses"] = hyp.to_dict()
    if b.noise.family != "none":
        cert = nz.growth_certificate(b.noise, vb.certificate_samples, np.random.default_rng([seed, 1]),
                                     radius=vb.lipschitz_radius)
        for key, est, c in (("Lg", cert.Lg_estimate, cert.certified_Lg),
                            ("Lg_tilde", cert.Lg_tilde_estimate, cert.certified_Lg_tilde),
                            ("Lgv_hat", cert.Lgv_hat_estimate, cert.certified_Lgv_hat),
                            ("Lr", cert.Lr_estimate, cert.certified_Lr)):
            rows.append([f"{key}_estimate", est, math.nan if c is None else c,
                         c is None or f"{key} estimate" not in " ".join(cert.failures)])
        out.checks["certificates"] = cert.passed
        out.report["certificates"] = cert.to_dict()
        out.report["eps"] = eps_status(b)
    out.tables["hypotheses"] = (["check", "value", "limit", "passed"], rows)
    return out


# -- pullback -------------------------------------------------------------------

def prepare_pullback(b: Built):
    if b.solver.kappa is None or b.solver.kappa_tilde is None:
        raise ConfigError("pullback needs solver.kappa and solver.kappa_tilde")
    if b.model.certified_c0_B4 is None:
        raise ConfigError("pullback needs model.certified_c0_B4 for the weighted V estimate")
    if not b.cfg.experiment.pullback.times or any(t <= 0 for t in b.cfg.experiment.pullback.times):
        raise ConfigError("experiment.pullback.times must be positive")


def run_pullback(b: Built, seed: int, workers: int) -> Outcome:
    pb = b.cfg.experiment.pullback
    tau = b.cfg.solver.tau
    eps = eps_status(b)
    out = Outcome()
    out.report["eps"] = eps
    init = _initial(b, seed)
    times = sorted(pb.times)
    ens = solver.run_ensemble(b.model, b.noise, b.forcing, init, tau, max(times), b.solver, seed, workers)
    ensembles = [ens]
    diag_rows, plots = [], []
    tables = {}
    for which, ts in (("m2", times), ("v_integral", pb.v_integral_times), ("m4", times),
                      ("weighted_v", times)):
        if which == "v_integral" and not b.forcing.autonomous:
            continue
        ts = [t for t in ts if t <= max(times)]
        if not ts:
            continue
        tab = solver.moment_diagnostics(ens, which, [tau + t for t in ts])
        tables[which] = tab
        for r in tab.rows:
            diag_rows.append([which, r["elapsed"], r["estimate"], r["se"], r["upper"], r["bound"], r["passed"]])
        el = [r["elapsed"] for r in tab.rows]
        _series(plots, f"{which}_estimate", el, [r["estimate"] for r in tab.rows],
                [dynamics.Z975 * r["se"] for r in tab.rows])
        _series(plots, f"{which}_bound", el, [r["bound"] for r in tab.rows])
    # pullback: start at tau - t, end at tau, against R(tau)
    R = solver.absorbing_radius(b.model, b.forcing, b.solver.kappa, tau)
    pb_rows = []
    for t in times:
        e = solver.run_ensemble(b.model, b.noise, b.forcing, init, tau - t, t, b.solver, seed, workers)
        ensembles.append(e)
        m, se = solver.mean_se(e.h2[:, -1])
        up = m + solver.Z95 * se
        pb_rows.append([t, m, se, up, R, up <= R])
    inside = [r[-1] for r in pb_rows]
    first = inside.index(True) if True in inside else None
    entered_and_stays = first is not None and all(inside[first:])
    _series(plots, "pullback_h2", [r[0] for r in pb_rows], [r[1] for r in pb_rows],
            [dynamics.Z975 * r[2] for r in pb_rows])
    _series(plots, "absorbing_radius", [r[0] for r in pb_rows], [R] * len(pb_rows))
    out.tables["moment_bounds"] = (["quantity", "elapsed", "estimate", "se", "upper", "bound", "passed"],
                                   diag_rows)
    out.tables["pullback"] = (["t", "mean_h2", "se_h2", "upper", "R_tau", "inside"], pb_rows)
    out.blowups = _check_blowups(*ensembles)
    skip = not eps["within"]
    for which, tab in tables.items():
        out.checks[which] = None if skip else tab.passed
    out.checks["absorbing"] = None if skip else entered_and_stays
    out.report.update(R_tau=R, rho=solver.rho_constants(
        b.model.mu, b.model.lambda1, b.solver.kappa, b.solver.kappa_tilde,
        float(spaces.dual_norm_sq(b.model.space, b.forcing.f_inf))),
        estimates_skipped=skip, absorbing_entered_and_stays=entered_and_stays,
        diagnostics={k: t.to_dict() for k, t in tables.items()})
    out.plots["moment_bounds"] = plots
    return out


# -- invariant --------------------------------------------------------------------

def _ou_second_moments(b: Built):
    """Stationary ``E u_i^2`` of a linear model with additive noise (``None`` otherwise)."""
    if b.model.kind != "linear" or b.noise.family not in ("additive", "none") or not b.forcing.autonomous:
        return None
    lam = b.model.space.eigenvalues
    mu = b.model.mu
    var = b.noise.eps1**2 * b.noise.sigma**2 if b.noise.family == "additive" else np.zeros_like(lam)
    for w, z in zip(b.noise.jumps.weights, b.noise.jumps.marks):
        var = var + b.noise.eps2**2 * w * z**2
    mean = b.forcing.f_inf / (mu * lam)
    return mean**2 + var / (2 * mu * lam)


def prepare_invariant(b: Built):
    if not b.forcing.autonomous:
        raise ConfigError("invariant needs constant forcing")
    if not b.cfg.experiment.invariant.windows:
        raise ConfigError("experiment.invariant.windows must not be empty")


def run_invariant(b: Built, seed: int, workers: int) -> Outcome:
    ib = b.cfg.experiment.invariant
    windows = sorted(ib.windows)
    init = _initial(b, seed)
    t0 = ib.burn_in
    ens = solver.run_ensemble(b.model, b.noise, b.forcing, init, 0.0, t0 + windows[-1], b.solver, seed,
                              workers, keep_states=True)
    out = Outcome(blowups=ens.n_blowups)
    if ens.n_blowups:
        out.report = dict(n_blowups=ens.n_blowups)
        return out
    family = dynamics.ramp_family(b.model.dim, ib.n_test_functions, seed=seed)
    res_rows, plots = [], []
    results = []
    for j, W in enumerate(windows):
        mu_occ = dynamics.occupation_measure(ens, (t0, t0 + W), max_atoms=ib.max_atoms)
        r = dynamics.invariance_residual(mu_occ, ib.residual_time, b.model, b.noise, b.forcing, b.solver,
                                         family=family, paths_per_atom=ib.paths_per_atom,
                                         master_seed=seed + 1 + j, workers=workers)
        results.append(r)
        res_rows.append([W, mu_occ.size, r.residual, r.ci, r.control])
    out.tables["residuals"] = (["window", "atoms", "residual", "ci", "control"], res_rows)
    _series(plots, "invariance_residual", windows, [r.residual for r in results], [r.ci for r in results])
    out.checks["residual_trend"] = dynamics.nonincreasing_within_ci([r.residual for r in results],
                                                                    [r.ci for r in results])
    out.checks["control_zero"] = all(r.control <= 1e-12 for r in results)  # roundoff in the weight sum
    exact = _ou_second_moments(b)
    if exact is not None:
        x = dynamics._window_states(ens, (t0, t0 + windows[-1]), 1)
        per_path = np.mean(x**2, axis=1)
        m = per_path.mean(axis=0)
        se = per_path.std(axis=0, ddof=1) / math.sqrt(per_path.shape[0])
        z = (m - exact) / se
        out.tables["second_moments"] = (["mode", "estimate", "se", "exact", "z"],
                                        [[i, m[i], se[i], exact[i], z[i]] for i in range(m.size)])
        _series(plots, "second_moment", range(m.size), m, dynamics.Z975 * se)
        _series(plots, "stationary_second_moment", range(m.size), exact)
        out.checks["second_moments_3se"] = bool(np.all(np.abs(z) <= 3))
        out.checks["residual_3ci"] = results[-1].residual <= 3 * results[-1].ci
    out.report = dict(windows=windows, burn_in=t0, residuals=[r.to_dict() for r in results],
                      exact_second_moments=None if exact is None else exact.tolist())
    out.plots["invariance"] = plots
    return out


# -- sweep ------------------------------------------------------------------------

def _ladder(b: Built):
    sb = b.cfg.experiment.sweep
    e1, e2 = sb.eps_hat
    lad = [(e1 + 2.0**-j, e2 + 2.0**-j) for j in sb.ladder_j]
    if any(not (0 < a <= 1 and 0 < c <= 1) for a, c in lad):
        raise ConfigError("sweep ladder leaves (0, 1]; lower eps_hat or raise ladder_j")
    return lad


def prepare_sweep(b: Built):
    if b.noise.family == "none":
        raise ConfigError("sweep needs a noise family")
    if len(b.cfg.experiment.sweep.ladder_j) < 2:
        raise ConfigError("sweep needs at least two ladder points")
    _ladder(b)


def run_sweep(b: Built, seed: int, workers: int) -> Outcome:
    sb = b.cfg.experiment.sweep
    T = sb.T or b.cfg.solver.T
    init = _initial(b, seed)
    tab = dynamics.intensity_sweep(b.model, b.noise, b.forcing, init, T, b.solver, sb.eps_hat, _ladder(b),
                                   master_seed=seed, workers=workers, dp_atoms=sb.dp_atoms, n_boot=sb.n_boot)
    out = Outcome()
    keys = ["eps1", "eps2", "delta", "sup_diff2", "sup_diff2_se", "sup_diff2_ci", "dp", "dp_ci"]
    out.tables["sweep"] = (keys, [[r[k] for k in keys] for r in tab.rows])
    plots = []
    d = [r["delta"] for r in tab.rows]
    _series(plots, "sup_diff2", d, [r["sup_diff2"] for r in tab.rows], [r["sup_diff2_ci"] for r in tab.rows])
    _series(plots, "dp", d, [r["dp"] for r in tab.rows], [r["dp_ci"] for r in tab.rows])
    _series(plots, "quadratic_fit", d, [math.exp(tab.slope_intercept) * x**tab.slope for x in d])
    out.plots["sweep_curves"] = plots
    out.checks["slope_in_range"] = 1.5 <= tab.slope <= 2.5
    out.checks["dp_monotone"] = tab.dp_monotone
    out.report = tab.to_dict()
    return out


# -- autonomy ---------------------------------------------------------------------

def prepare_autonomy(b: Built):
    ab = b.cfg.experiment.autonomy
    if len(ab.tau_ladder) < 2:
        raise ConfigError("autonomy needs at least two tau values")
    if ab.window > ab.t_pullback:
        raise ConfigError("autonomy window must not exceed t_pullback")
    try:
        for tau in ab.tau_ladder:
            models.autonomy_integral(b.forcing, tau + ab.coupled_T)
    except models.DivergentIntegralError as exc:
        raise ConfigError(str(exc)) from exc


def run_autonomy(b: Built, seed: int, workers: int) -> Outcome:
    ab = b.cfg.experiment.autonomy
    rep = dynamics.asymptotic_autonomy(b.model, b.noise, b.forcing, ab.tau_ladder, ab.t_pullback, b.solver,
                                       b.cfg.experiment.n_paths, init_sampler=b.init, window=ab.window,
                                       coupled_T=ab.coupled_T, master_seed=seed, workers=workers,
                                       dp_atoms=ab.dp_atoms, n_boot=ab.n_boot, stable_factor=ab.stable_factor)
    out = Outcome()
    keys = ["tau", "dp", "dp_ci", "sup_diff2", "sup_diff2_se", "integral", "C"]
    out.tables["autonomy"] = (keys, [[r[k] for k in keys] for r in rep.rows])
    plots = []
    taus = [r["tau"] for r in rep.rows]
    _series(plots, "dp", taus, [r["dp"] for r in rep.rows], [r["dp_ci"] for r in rep.rows])
    _series(plots, "C", taus, [r["C"] for r in rep.rows])
    out.plots["autonomy_trend"] = plots
    out.checks["trend_nonincreasing"] = rep.trend_nonincreasing
    out.checks["C_stable"] = None if b.forcing.autonomous else rep.C_stable
    out.report = rep.to_dict()
    return out


# -- tail -------------------------------------------------------------------------

def prepare_tail(b: Built):
    if b.model.certified_c0_B4 is None:
        raise ConfigError("tail needs model.certified_c0_B4")
    if b.cfg.experiment.tail.window > b.cfg.solver.T:
        raise ConfigError("tail window must not exceed solver.T")


def run_tail(b: Built, seed: int, workers: int) -> Outcome:
    tb = b.cfg.experiment.tail
    sb = b.cfg.solver
    eps = eps_status(b)
    ens = solver.pullback_ensemble(b.model, b.noise, b.forcing, b.init, sb.tau, sb.T,
                                   b.cfg.experiment.n_paths, b.solver, seed, workers)
    out = Outcome(blowups=ens.n_blowups)
    rep = dynamics.v_tail_check(ens, tb.R_ladder, window=tb.window)
    keys = ["R", "tail", "tail_upper", "bound", "passed"]
    out.tables["tail"] = (keys, [[r[k] for k in keys] for r in rep.rows])
    plots = []
    Rs = [r["R"] for r in rep.rows]
    for r in rep.rows:
        plots.append(("empirical_tail", r["R"], r["tail"], r["tail_lower"], r["tail_upper"]))
    _series(plots, "bound", Rs, [r["bound"] for r in rep.rows])
    out.plots["tail_bounds"] = plots
    out.checks["tail_bound"] = None if not eps["within"] else rep.passed
    out.report = dict(rep.to_dict(), eps=eps, estimates_skipped=not eps["within"])
    return out


COMMANDS = {
    "simulate": (prepare_simulate, run_simulate),
    "verify-hypotheses": (prepare_verify, run_verify),
    "pullback": (prepare_pullback, run_pullback),
    "invariant": (prepare_invariant, run_invariant),
    "sweep": (prepare_sweep, run_sweep),
    "autonomy": (prepare_autonomy, run_autonomy),
    "tail": (prepare_tail, run_tail),
}

import math

import numpy as np
import pytest

from hydrolevy import models, noise as nz, solver, spaces
from hydrolevy.models import ForcingSpec
from hydrolevy.solver import SolverConfig
from oracles import _sabra_nonlinear


def zero_forcing(m):
    return ForcingSpec.constant(np.zeros(m.dim))


@pytest.fixture(scope="module")
def sab6():
    return models.build_sabra(6)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(dt=0.0)
    with pytest.raises(ValueError):
        SolverConfig(record_stride=0)
    m = models.build_linear([1.0, 2.0])
    with pytest.raises(ValueError):
        SolverConfig(kappa=0.5).check_rates(m)
    with pytest.raises(ValueError):
        SolverConfig(kappa_tilde=0.0).check_rates(m)
    SolverConfig(kappa=0.4, kappa_tilde=0.4).check_rates(m)


def test_step_zero_is_equilibrium(sab6):
    out = solver.step(sab6, nz.no_noise(sab6.space), zero_forcing(sab6), np.zeros(12), 0.0, 0.01)
    np.testing.assert_array_equal(out, np.zeros(12))


def test_step_resolvent_only():
    m = models.build_linear([3.0])
    out = solver.step(m, nz.no_noise(m.space), zero_forcing(m), np.array([2.0]), 0.0, 0.1)
    assert out[0] == pytest.approx(2.0 / 1.3, rel=1e-15)


def test_step_needs_stream_with_noise(sab6):
    n = nz.make_noise(sab6.space, "additive", 0.1)
    with pytest.raises(ValueError):
        solver.step(sab6, n, zero_forcing(sab6), np.zeros(12), 0.0, 0.01)
    with pytest.raises(spaces.DimensionError):
        solver.step(sab6, nz.no_noise(sab6.space), zero_forcing(sab6), np.zeros(5), 0.0, 0.01)


def test_step_blowup_is_reported():
    m = models.build_linear([1.0])
    f = ForcingSpec.constant(np.array([np.inf]))
    with pytest.raises(solver.BlowUpError):
        solver.step(m, nz.no_noise(m.space), f, np.array([1.0]), 0.0, 0.1)


def _explicit_step(m, n, f, u, dt, seed, k=math.inf):
    """Independent explicit Euler step built from the complex Sabra formula."""
    p = m.params
    kk = models.sabra_wavenumbers(p["n_shells"], p["k0"])
    z = u[0::2] + 1j * u[1::2]
    fz = f[0::2] + 1j * f[1::2]
    drift_c = _sabra_nonlinear(z, kk, p["a"], p["b"], p["c"], fz)
    drift = np.empty_like(u)
    drift[0::2], drift[1::2] = drift_c.real, drift_c.imag
    s = nz.DriverStream(seed, 0)
    dw = nz.wiener_increment(s, m.dim, dt)
    atoms = nz.jump_atoms(s, n.jumps, dt)
    r = np.linalg.norm(u)
    ut = u if r <= k else u * (k / r)
    sh = ut / (1 + np.linalg.norm(ut))
    jumps = sum(n.jumps.marks[a] * sh for a in atoms) - dt * sum(w * z_ * sh for w, z_ in zip(n.jumps.weights, n.jumps.marks))
    lam = m.space.eigenvalues
    return u + dt * (drift - m.mu * lam * u) + n.eps1 * n.sigma * sh * dw + n.eps2 * jumps


@pytest.mark.parametrize("k", [math.inf, 0.5])
def test_step_against_explicit_euler(sab6, k):
    rng = np.random.default_rng(0)
    u = rng.standard_normal(12) * np.repeat(2.0 ** -np.arange(6), 2)
    f = rng.standard_normal(12) * 0.3
    n = nz.make_noise(sab6.space, "bounded_multiplicative", 0.5, marks=[0.8, -0.6], weights=[3e3, 2e3],
                      eps1=0.7, eps2=0.9)
    dt = 1e-4
    got = solver.step(sab6, n, ForcingSpec.constant(f), u, 0.0, dt, nz.DriverStream(5, 0), k=k)
    ref = _explicit_step(sab6, n, f, u, dt, 5, k)
    c = sab6.mu * sab6.space.eigenvalues * dt
    # implicit and explicit differ exactly by the resolvent correction
    np.testing.assert_allclose((1 + c) * got - c * u, ref, rtol=1e-12, atol=1e-14)
    assert np.linalg.norm(got - ref) <= 10 * np.linalg.norm(c * (np.abs(ref - u) + c * np.abs(u)))


def test_deterministic_step_error_is_second_order(sab6):
    rng = np.random.default_rng(1)
    u = rng.standard_normal(12) * np.repeat(2.0 ** -np.arange(6), 2)
    off = nz.no_noise(sab6.space)
    errs = []
    for dt in (1e-5, 5e-6):
        got = solver.step(sab6, off, zero_forcing(sab6), u, 0.0, dt)
        errs.append(np.linalg.norm(got - _explicit_step(sab6, off, np.zeros(12), u, dt, 0)))
    assert 3.5 <= errs[0] / errs[1] <= 4.5


def test_noise_free_norm_strictly_decreasing():
    m = models.build_sabra(8)
    u0 = spaces.random_states(m.space, np.random.default_rng(2), 1)[0]
    rec = solver.simulate_path(m, nz.no_noise(m.space), zero_forcing(m), u0, 0.0, 0.5,
                               SolverConfig(dt=1e-4, record_stride=50))
    assert np.all(np.diff(rec.h_norm_sq()) < 0)


def test_same_seed_same_path(sab6):
    n = nz.make_noise(sab6.space, "linear_diagonal", 0.3, marks=[0.2], weights=[5.0])
    u0 = np.ones(12) * 0.1
    cfg = SolverConfig(dt=1e-3, record_stride=7)
    a, b = (solver.simulate_path(sab6, n, zero_forcing(sab6), u0, 0.0, 0.2, cfg, nz.DriverStream(3, 1))
            for _ in range(2))
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.ledger, b.ledger)
    np.testing.assert_array_equal(a.times[[0, -1]], [0.0, 0.2])


def test_path_matches_ensemble_row(sab6):
    n = nz.make_noise(sab6.space, "additive", 0.2, marks=[0.1], weights=[4.0])
    u0 = np.full((5, 12), 0.05)
    cfg = SolverConfig(dt=1e-3, record_stride=10, block_size=2)
    ens = solver.run_ensemble(sab6, n, zero_forcing(sab6), u0, 0.0, 0.1, cfg, master_seed=8, keep_states=True)
    rec = solver.simulate_path(sab6, n, zero_forcing(sab6), u0[3], 0.0, 0.1, cfg, nz.DriverStream(8, 3))
    np.testing.assert_array_equal(ens.states[3], rec.states)


def test_workers_do_not_change_results(sab6):
    n = nz.make_noise(sab6.space, "bounded_multiplicative", 0.3, marks=[0.3, -0.2], weights=[1.0, 2.0])
    u0 = spaces.random_states(sab6.space, np.random.default_rng(3), 10)
    cfg = SolverConfig(dt=1e-3, record_stride=10, block_size=3)
    a = solver.run_ensemble(sab6, n, zero_forcing(sab6), u0, 0.0, 0.2, cfg, master_seed=1, workers=1)
    b = solver.run_ensemble(sab6, n, zero_forcing(sab6), u0, 0.0, 0.2, cfg, master_seed=1, workers=4)
    for key in ("final_states", "h2", "v2", "int_v2", "int_hv", "ledger"):
        np.testing.assert_array_equal(getattr(a, key), getattr(b, key))


def test_truncation_inert_above_path_max(sab6):
    n = nz.make_noise(sab6.space, "linear_diagonal", 0.3, marks=[0.2], weights=[5.0])
    u0 = np.ones(12) * 0.1
    cfg = SolverConfig(dt=1e-3, record_stride=5)
    free = solver.simulate_path(sab6, n, zero_forcing(sab6), u0, 0.0, 0.3, cfg, nz.DriverStream(2, 0))
    kmax = 2 * np.sqrt(free.h_norm_sq()).max()
    cut = solver.simulate_path(sab6, n, zero_forcing(sab6), u0, 0.0, 0.3,
                               SolverConfig(dt=1e-3, record_stride=5, truncation_radius=kmax), nz.DriverStream(2, 0))
    np.testing.assert_array_equal(free.states, cut.states)
    assert cut.stopping_events == []


def test_truncation_changes_noise_only_beyond_radius():
    m = models.build_linear([1.0])
    n = nz.make_noise(m.space, "linear_diagonal", 1.0, eps1=1.0, eps2=0.0)
    u = np.array([4.0])
    a = solver.step(m, n, zero_forcing(m), u, 0.0, 0.01, nz.DriverStream(0, 0), k=1.0)
    b = solver.step(m, n, zero_forcing(m), u, 0.0, 0.01, nz.DriverStream(0, 0))
    dw = nz.wiener_increment(nz.DriverStream(0, 0), 1, 0.01)[0]
    # noise sees retract(u, 1) = 1 while the drift sees u
    assert a[0] == pytest.approx((4.0 + dw) / 1.01, rel=1e-14)
    assert b[0] == pytest.approx((4.0 + 4.0 * dw) / 1.01, rel=1e-14)


def test_escalating_truncation_events_ordered():
    m = models.build_linear([1.0])
    f = ForcingSpec.constant(np.array([20.0]))
    cfg = SolverConfig(dt=1e-2, record_stride=10, truncation_radius=1.0, escalate_truncation=True)
    rec = solver.simulate_path(m, nz.no_noise(m.space), f, np.zeros(1), 0.0, 3.0, cfg)
    ks = [k for k, _ in rec.stopping_events]
    ts = [t for _, t in rec.stopping_events]
    assert ks == [1.0, 2.0, 4.0, 8.0, 16.0]
    assert ts == sorted(ts)


def test_energy_residual_zero_path(sab6):
    rec = solver.simulate_path(sab6, nz.no_noise(sab6.space), zero_forcing(sab6), np.zeros(12), 0.0, 0.1,
                               SolverConfig(dt=1e-2))
    np.testing.assert_array_equal(solver.energy_residual(rec), np.zeros(rec.times.size))


def test_energy_residual_first_order(sab6):
    u0 = 0.5 * np.repeat(2.0 ** -np.arange(6), 2)
    f = ForcingSpec.constant(np.r_[1.0, 0.5, np.zeros(10)])
    res = []
    for dt in (1e-3, 5e-4, 2.5e-4):
        rec = solver.simulate_path(sab6, nz.no_noise(sab6.space), f, u0, 0.0, 1.0, SolverConfig(dt=dt))
        res.append(np.abs(solver.energy_residual(rec)).max())
    for a, b in zip(res, res[1:]):
        assert 0.75 * 2 <= a / b <= 1.25 * 2


def test_pullback_zero_everything(sab6):
    ens = solver.pullback_ensemble(sab6, nz.no_noise(sab6.space), zero_forcing(sab6), None, 0.0, 0.5, 4,
                                   SolverConfig(dt=1e-2, kappa=1.0, kappa_tilde=1.0))
    for key in ("final_states", "h2", "v2", "int_v2", "int_hv"):
        assert not np.any(getattr(ens, key))
    assert ens.times[0] == -0.5 and ens.times[-1] == 0.0
    with pytest.raises(ValueError):
        solver.pullback_ensemble(sab6, nz.no_noise(sab6.space), zero_forcing(sab6), None, 0.0, 0.0, 4,
                                 SolverConfig())


def test_frozen_ensemble_moments():
    # with negligible viscosity and no forcing every path stays at c
    m = models.build_linear([1.0, 1.0], mu=1e-300)
    c = np.array([0.6, 0.8])
    ens = solver.run_ensemble(m, nz.no_noise(m.space), zero_forcing(m), np.tile(c, (3, 1)), 0.0, 0.1,
                              SolverConfig(dt=0.05, kappa=1e-301, kappa_tilde=1e-301))
    np.testing.assert_array_equal(ens.h2[:, -1], np.full(3, 1.0))
    m2 = solver.moment_diagnostics(ens, "m2").rows[0]
    assert m2["estimate"] == pytest.approx(1.0, rel=1e-12)
    assert m2["se"] == 0.0


def test_weight_of_zero_path_is_one(sab6):
    ens = solver.pullback_ensemble(sab6, nz.no_noise(sab6.space), zero_forcing(sab6), None, 0.0, 0.1, 2,
                                   SolverConfig(dt=1e-2, kappa=1.0, kappa_tilde=1.0))
    assert np.all(np.exp(-solver.weight_exponent(sab6) * ens.int_hv[:, -1]) == 1.0)
    assert solver.weight_exponent(sab6) == pytest.approx(27 * 0.25**2 / 2)
    with pytest.raises(nz.MissingCertificateError):
        solver.weight_exponent(models.build_sabra(6, certified_c0_B4=None))


def test_v_integral_bound_small_ensemble(sab6):
    f = ForcingSpec.constant(np.r_[1.0, 0.5, np.zeros(10)])
    n = nz.make_noise(sab6.space, "bounded_multiplicative", 0.3, marks=[0.3], weights=[1.0], eps1=0.3, eps2=0.3)
    ens = solver.pullback_ensemble(sab6, n, f, np.full(12, 0.1), 0.0, 1.0, 100,
                                   SolverConfig(dt=1e-3, record_stride=100, kappa=1.0, kappa_tilde=1.0))
    tab = solver.moment_diagnostics(ens, "v_integral")
    assert tab.passed, tab.rows
    r1 = solver.rho_constants(1.0, 4.0, kappa=1.0, f_dual_sq=(1.0 + 0.25) / 4.0)["rho1"]
    assert r1 == pytest.approx(4 / 1 * (2 * 1.25 / 4 + 2))
    assert tab.rows[0]["bound"] == pytest.approx(12 * 0.01 + r1, rel=1e-12)


def test_stopping_profile():
    m = models.build_linear([1.0])
    rec = solver.simulate_path(m, nz.no_noise(m.space), ForcingSpec.constant(np.array([3.0])), np.zeros(1),
                               0.0, 2.0, SolverConfig(dt=1e-2, record_stride=5))
    top = np.sqrt(rec.h_norm_sq()).max()
    prof = solver.stopping_profile(rec, [0.5, 1.0, 2.0, top + 1])
    assert prof[-1] is None
    assert prof[:3] == sorted(prof[:3])
    with pytest.raises(ValueError):
        solver.stopping_profile(rec, [2.0, 1.0])


def test_rho_and_radius():
    r = solver.rho_constants(1.0, 4.0)
    assert r["rho0"] == 3.0
    m = models.build_sabra(6)
    f = ForcingSpec.constant(np.r_[2.0, np.zeros(11)])
    assert solver.absorbing_radius(m, f, 1.0, 0.0) == pytest.approx(3.0 + 3.0 * 4.0 / 4.0, rel=1e-12)


def test_stopping_profile_hand_built_path():
    times = np.arange(10) * 0.1
    norms = np.r_[np.linspace(0.0, 0.9, 7), 1.2, 0.5, 3.0]
    rec = solver.PathRecord(times, norms[:, None], np.zeros((10, 6)), [])
    prof = solver.stopping_profile(rec, [1.0, 2.0, 5.0])
    assert prof == [times[7], times[9], None]

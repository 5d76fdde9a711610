import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydrolevy import models, spaces
from oracles import nse_advect_direct


@pytest.fixture(scope="module")
def sabra():
    return models.build_sabra(16)


@pytest.fixture(scope="module")
def nse4():
    return models.build_nse2d(4)


def test_sabra_layout(sabra):
    assert sabra.dim == 32
    assert sabra.lambda1 == 4.0
    assert sabra.space.eigenvalues[-1] == 4.0**16


def test_sabra_rejects_bad_parameters():
    with pytest.raises(ValueError):
        models.build_sabra(3)
    with pytest.raises(ValueError):
        models.build_sabra(16, a=1.0, b=-0.5, c=-0.4)
    with pytest.raises(ValueError):
        models.build_sabra(16, k0=0.0)


def test_sabra_single_shell_has_no_self_interaction(sabra):
    for shell in range(16):
        u = np.zeros(32)
        u[2 * shell] = 1.3
        u[2 * shell + 1] = -0.7
        np.testing.assert_array_equal(sabra.bilinear(u, u), np.zeros(32))


def test_sabra_matches_complex_formula(sabra):
    # B(u,u) is minus the nonlinear term of du_n/dt in complex form
    rng = np.random.default_rng(1)
    u = rng.standard_normal(32)
    z = u[0::2] + 1j * u[1::2]
    k = 2.0 ** np.arange(1, 17)
    pad = np.concatenate([[0, 0], z, [0, 0]])
    rhs = np.empty(16, complex)
    for n in range(16):
        i = n + 2
        kn1 = 2.0 ** (n + 2)
        kn = k[n]
        knm1 = 2.0 ** n
        rhs[n] = 1j * (kn1 * pad[i + 2] * np.conj(pad[i + 1]) - 0.5 * kn * pad[i + 1] * np.conj(pad[i - 1])
                       + 0.5 * knm1 * pad[i - 1] * pad[i - 2])
    b = sabra.bilinear(u, u)
    np.testing.assert_allclose(b[0::2] + 1j * b[1::2], -rhs, rtol=1e-12, atol=1e-12 * np.abs(rhs).max())


def test_nse_layout(nse4):
    assert nse4.lambda1 == 1.0
    n = sum(1 for kx in range(-4, 5) for ky in range(-4, 5) if 0 < kx * kx + ky * ky <= 16)
    assert nse4.dim == n  # one complex amplitude per +-k pair
    with pytest.raises(ValueError):
        models.build_nse2d(1)


def test_nse_zero_advecting_field(nse4):
    v = np.random.default_rng(2).standard_normal(nse4.dim)
    np.testing.assert_array_equal(nse4.bilinear(np.zeros(nse4.dim), v), np.zeros(nse4.dim))


def test_nse_two_mode_convolution(nse4):
    labels = [tuple(k) for k in nse4.basis.wavevectors]
    i10, i11 = labels.index((1, 0)), labels.index((1, 1))
    u = np.zeros(nse4.dim)
    u[2 * i10], u[2 * i10 + 1] = 0.7, -0.2
    u[2 * i11], u[2 * i11 + 1] = 0.4, 0.9
    direct = nse_advect_direct(nse4.basis.wavevectors, u, u, 16)
    out = nse4.bilinear(u, u)
    np.testing.assert_allclose(out, direct, atol=1e-13)
    active = {labels[i] for i in np.nonzero(np.abs(out) > 1e-12)[0] // 2}
    pair = {(2, 1), (-2, -1), (0, 1), (0, -1)}  # k + p and k - p, up to sign
    assert active and active <= pair


def test_nse_equal_magnitude_triad_is_silent(nse4):
    # the triad coefficient scales with |q|^2 - |p|^2
    labels = [tuple(k) for k in nse4.basis.wavevectors]
    u = np.zeros(nse4.dim)
    u[2 * labels.index((1, 0))] = 0.7
    u[2 * labels.index((0, 1)) + 1] = 0.9
    np.testing.assert_allclose(nse4.bilinear(u, u), 0.0, atol=1e-14)


def test_nse_matches_direct_sums_on_random_states(nse4):
    rng = np.random.default_rng(3)
    for _ in range(3):
        u, v = rng.standard_normal((2, nse4.dim))
        np.testing.assert_allclose(nse4.bilinear(u, v), nse_advect_direct(nse4.basis.wavevectors, u, v, 16),
                                   atol=1e-12)


@pytest.mark.parametrize("builder", [lambda: models.build_sabra(8), lambda: models.build_nse2d(3)])
@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_skew_and_bilinear(builder, seed):
    m = builder()
    rng = np.random.default_rng(seed)
    u, v, w, x = spaces.random_states(m.space, rng, 4)
    a = rng.standard_normal()
    buv, buw = m.bilinear(u, v), m.bilinear(u, w)
    scale = spaces.h_norm(m.space, buv) * spaces.h_norm(m.space, w) + spaces.h_norm(m.space, buw) * spaces.h_norm(m.space, v)
    assert abs(buv @ w + buw @ v) <= 1e-10 * scale + 1e-300
    assert abs(buv @ v) <= 1e-10 * spaces.h_norm(m.space, u) * spaces.v_norm(m.space, v) ** 2 + 1e-300
    lhs = m.bilinear(a * u + x, v)
    ref = np.abs(a) * np.abs(buv).max() + np.abs(m.bilinear(x, v)).max()
    np.testing.assert_allclose(lhs, a * buv + m.bilinear(x, v), atol=1e-12 * ref)
    np.testing.assert_allclose(m.bilinear(u, a * v + x), a * buv + m.bilinear(u, x), atol=1e-12 * ref)


def test_nse_output_is_divergence_free(nse4):
    # every coefficient multiplies a polarization orthogonal to its wavevector
    kv = nse4.basis.wavevectors.astype(float)
    assert np.abs(np.einsum("mc,mc->m", kv, nse4.basis.polarization)).max() < 1e-15


def test_verify_hypotheses_sabra(sabra):
    rep = models.verify_hypotheses(sabra, 1000, rng_seed=0)
    assert rep.passed, rep.failures
    assert rep.skew_defect <= 1e-10
    with pytest.raises(ValueError):
        models.verify_hypotheses(sabra, 0)


def test_verify_hypotheses_nse_estimate_stable(nse4):
    a = models.verify_hypotheses(nse4, 1000, rng_seed=0)
    b = models.verify_hypotheses(nse4, 2000, rng_seed=0)
    assert a.passed and b.passed
    assert math.isfinite(a.C_B3_estimate)
    assert b.C_B3_estimate <= 1.1 * a.C_B3_estimate


def test_verify_hypotheses_flags_undercertified(sabra):
    m = models.build_sabra(16, certified_C_B3=1e-3)
    rep = models.verify_hypotheses(m, 200)
    assert not rep.passed
    assert any("B3" in f for f in rep.failures)


def test_certified_constants_cover_ascent_sup():
    """BFGS ascent on the B4 ratio from the best random starts stays below the certificate."""
    from scipy.optimize import minimize

    m = models.build_sabra(16)
    sp, lam, d = m.space, m.space.eigenvalues, m.dim
    T = m.bilinear.dense()

    def neg_ratio(x):
        u, v = x[:d], x[d:]
        b = np.einsum("ijk,j,k->i", T, u, v)
        hu, vu, av, vv = u @ u, u @ (lam * u), v @ (lam**2 * v), v @ (lam * v)
        den = math.sqrt(hu * vu * av * vv)
        r = (b @ b) / den
        gu = 2 * np.einsum("ijk,k,i->j", T, v, b) / den - r * (u / hu + lam * u / vu)
        gv = 2 * np.einsum("ijk,j,i->k", T, u, b) / den - r * (lam**2 * v / av + lam * v / vv)
        return -r, -np.concatenate([gu, gv])

    rng = np.random.default_rng(4)
    u, v = spaces.random_states(sp, rng, 20000), spaces.random_states(sp, rng, 20000)
    r = spaces.h_norm(sp, m.bilinear(u, v)) ** 2 / (spaces.h_norm(sp, u) * spaces.v_norm(sp, u)
                                                     * spaces.a_norm(sp, v) * spaces.v_norm(sp, v))
    best = max(-minimize(neg_ratio, np.r_[u[i], v[i]], jac=True, method="BFGS").fun for i in np.argsort(r)[-3:])
    assert best > 2 * r.max()  # the ascent finds far more than sampling
    assert best <= m.certified_c0_B4


def test_forcing_integrals_closed_forms(sabra):
    sp = sabra.space
    f = np.zeros(32)
    f[0], f[1] = 1.0, 0.5
    const = models.ForcingSpec.constant(f)
    kap = 0.7
    assert models.forcing_weighted_integral(sp, const, kap, 3.0, "2_dualV") == pytest.approx(
        spaces.dual_norm_sq(sp, f) / kap, rel=1e-12)
    assert models.forcing_weighted_integral(sp, models.ForcingSpec.constant(np.zeros(32)), kap, 0.0, "4_H") == 0.0
    g = np.zeros(32)
    g[2] = 2.0
    fe = models.ForcingSpec.exp_approach(f, g, 1.5)
    lim = (f @ f) ** 2 / kap
    vals = [models.forcing_weighted_integral(sp, fe, kap, tau, "4_H") for tau in (-10.0, -20.0)]
    assert abs(vals[1] - lim) <= abs(vals[0] - lim)
    # closed form of int_{-inf}^{tau} e^{kap(s-tau)} |f + e^{r s} g|^4 ds for orthogonal f, g
    a, b, r, tau = f @ f, g @ g, 1.5, -10.0
    exact = (a * a / kap + 2 * a * b * math.exp(2 * r * tau) / (kap + 2 * r)
             + b * b * math.exp(4 * r * tau) / (kap + 4 * r))
    assert vals[0] == pytest.approx(exact, rel=1e-10)


def test_autonomy_integral(sabra):
    f = np.zeros(32)
    g = np.zeros(32)
    g[0] = 2.0
    fe = models.ForcingSpec.exp_approach(f, g, 1.0)
    # int_{-inf}^{u} |e^{s} g|^2 ds = 4 e^{2u} / 2 for u <= 0
    assert models.autonomy_integral(fe, -1.0) == pytest.approx(2.0 * math.exp(-2.0), rel=1e-12)
    assert models.autonomy_integral(models.ForcingSpec.constant(f), 5.0) == 0.0

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hydrolevy import models, spaces
from hydrolevy.spaces import GalerkinSpace

SPACE = GalerkinSpace(np.array([1.0, 2.0, 2.0, 5.0]))
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
states = arrays(np.float64, 4, elements=finite)


def test_space_rejects_bad_eigenvalues():
    with pytest.raises(ValueError):
        GalerkinSpace(np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        GalerkinSpace(np.array([2.0, 1.0]))
    with pytest.raises(ValueError):
        GalerkinSpace(np.array([1.0, 2.0]), mode_labels=("a",))


def test_h_norm_examples():
    assert spaces.h_norm(SPACE, np.zeros(4)) == 0.0
    assert spaces.h_norm(SPACE, [3.0, 4.0, 0.0, 0.0]) == 5.0


def test_dimension_mismatch():
    with pytest.raises(spaces.DimensionError):
        spaces.h_norm(SPACE, np.zeros(3))
    with pytest.raises(spaces.DimensionError):
        SPACE.check(np.zeros(5))
    with pytest.raises(ValueError):
        SPACE.check([0.0, np.nan, 0.0, 0.0])


def test_v_norm_single_modes():
    for k, lam in enumerate(SPACE.eigenvalues):
        e = np.zeros(4)
        e[k] = 1.0
        assert spaces.v_norm(SPACE, e) == pytest.approx(np.sqrt(lam), rel=1e-15)


def test_sabra_v_norm_of_third_shell():
    sp = models.build_sabra(16, k0=1.0).space
    e = np.zeros(32)
    e[4] = 1.0  # real part of shell 3
    assert spaces.v_norm(sp, e) == 8.0


@settings(max_examples=300, deadline=None)
@given(states)
def test_poincare(u):
    assert SPACE.lambda1 * spaces.h_norm_sq(SPACE, u) <= spaces.v_norm_sq(SPACE, u) * (1 + 1e-12) + 1e-300


def test_retract_examples():
    u = np.array([6.0, 8.0])
    np.testing.assert_array_equal(spaces.retract(u, 5.0), [3.0, 4.0])
    np.testing.assert_array_equal(spaces.retract(np.zeros(3), 0.1), np.zeros(3))
    v = np.array([0.3, 0.4])
    np.testing.assert_array_equal(spaces.retract(v, 1.0), v)
    with pytest.raises(ValueError):
        spaces.retract(v, 0.0)


def test_retract_batch_radii():
    u = np.array([[3.0, 4.0], [6.0, 8.0]])
    out = spaces.retract(u, np.array([1.0, np.inf]))
    np.testing.assert_allclose(out, [[0.6, 0.8], [6.0, 8.0]])


@settings(max_examples=300, deadline=None)
@given(states, st.floats(1e-3, 1e3))
def test_retract_idempotent_and_bounded(u, k):
    r = spaces.retract(u, k)
    assert spaces.h_norm(SPACE, r) <= k
    np.testing.assert_array_equal(spaces.retract(r, k), r)


@settings(max_examples=300, deadline=None)
@given(states, states, st.floats(1e-2, 1e2))
def test_retract_two_lipschitz(u, v, k):
    d = spaces.h_norm(SPACE, spaces.retract(u, k) - spaces.retract(v, k))
    assert d <= 2 * spaces.h_norm(SPACE, u - v) * (1 + 1e-12) + 1e-12


def test_resolvent_examples():
    sp = GalerkinSpace(np.array([1.0, 3.0]))
    np.testing.assert_array_equal(spaces.resolvent_step(sp, 1.0, 1.0, [1.0, 0.0]), [0.5, 0.0])
    np.testing.assert_array_equal(spaces.resolvent_step(sp, 1.0, 1.0, np.zeros(2)), np.zeros(2))
    with pytest.raises(ValueError):
        spaces.resolvent_step(sp, 1.0, 0.0, np.zeros(2))


@settings(max_examples=200, deadline=None)
@given(states, st.floats(1e-3, 10.0), st.floats(1e-4, 1.0))
def test_resolvent_contracts(u, mu, dt):
    out = spaces.resolvent_step(SPACE, mu, dt, u)
    assert spaces.h_norm(SPACE, out) <= spaces.h_norm(SPACE, u) / (1 + mu * dt * SPACE.lambda1) * (1 + 1e-12)
    assert spaces.v_norm(SPACE, out) <= spaces.v_norm(SPACE, u) * (1 + 1e-12)


def test_q_norm_interpolates():
    rng = np.random.default_rng(0)
    u = spaces.random_states(SPACE, rng, 100)
    q = spaces.q_norm(SPACE, u)
    assert np.all(q >= spaces.h_norm(SPACE, u) * SPACE.lambda1**0.25 * (1 - 1e-12))
    assert np.all(q <= spaces.v_norm(SPACE, u) / SPACE.lambda1**0.25 * (1 + 1e-12))


def test_dual_norm():
    assert spaces.dual_norm_sq(SPACE, [1.0, 2.0, 0.0, 0.0]) == pytest.approx(1.0 + 4.0 / 2.0)

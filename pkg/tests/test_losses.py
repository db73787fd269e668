import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from usrecon import losses as L

ALPHA = 10 ** (-3.1)
P = L.SltParams(ALPHA)


def _logb(v, b):
    return math.log(v) / math.log(b)


def mslae_case_oracle(x, eps, a):
    """Closed-form error of a scalar prediction ``eps * x`` per branch."""
    ax, aex = abs(x), abs(eps * x)
    if ax > a and aex > a and eps > 0:
        return abs(_logb(eps, a))
    if ax > a and aex > a and eps < 0:
        return abs(_logb(-a * a / (eps * x * x), a))
    if ax > a and aex <= a:
        return abs(_logb(a / ax, a))
    if ax <= a and aex > a:
        return abs(_logb(a / aex, a))
    return 0.0


def mmuae_case_oracle(x, eps, mu):
    nu = 1 + mu
    if eps > 0:
        return abs(_logb((1 + mu * eps * abs(x)) / (1 + mu * abs(x)), nu))
    return abs(_logb((1 - mu * eps * abs(x)) * (1 + mu * abs(x)), nu))


# --- signed log transform ----------------------------------------------------

def test_slt_examples():
    assert L.slt(np.array([1.0, -1.0]), P).tolist() == [1.0, -1.0]
    assert L.slt(np.array([ALPHA, ALPHA / 2, 0.0]), P).tolist() == [0.0, 0.0, 0.0]


@given(arrays(np.float64, 20, elements=st.floats(-10, 10)))
def test_slt_odd_and_monotone(x):
    np.testing.assert_array_equal(L.slt(-x, P), -L.slt(x, P))
    s = np.sort(x)
    assert np.all(np.diff(L.slt(s, P)) >= 0)


def test_slt_maps_alpha_one_to_unit_interval():
    v = L.slt(np.linspace(ALPHA, 1, 1000), P)
    assert v.min() == 0.0 and v.max() == pytest.approx(1.0)


def test_alpha_from_db():
    assert L.alpha_from_db(-62) == pytest.approx(10 ** (-3.1))
    with pytest.raises(ValueError):
        L.SltParams(1.0)
    with pytest.raises(ValueError):
        L.MuParams(0.0)


# --- case identities ----------------------------------------------------------

def _random_pairs(n, seed):
    rng = np.random.default_rng(seed)
    mag = 10 ** rng.uniform(-5, 1, n)
    x = mag * rng.choice([-1, 1], n)
    eps = 10 ** rng.uniform(-4, 4, n) * rng.choice([-1, 1], n)
    return x, eps


def test_mslae_case_identities():
    x, eps = _random_pairs(10000, 0)
    got = np.abs(L.slt_difference(x, eps * x, P))
    want = np.array([mslae_case_oracle(a, e, ALPHA) for a, e in zip(x, eps)])
    assert np.max(np.abs(got - want)) < 1e-12
    # every branch is exercised
    above, above_h = np.abs(x) > ALPHA, np.abs(eps * x) > ALPHA
    for m in (above & above_h & (eps > 0), above & above_h & (eps < 0), above & ~above_h,
              ~above & above_h, ~above & ~above_h):
        assert m.sum() > 100


def test_mslae_matches_transform_difference():
    x, eps = _random_pairs(2000, 1)
    d = np.abs(L.slt(x, P) - L.slt(eps * x, P))
    np.testing.assert_allclose(np.abs(L.slt_difference(x, eps * x, P)), d, atol=1e-12)


def test_mmuae_case_identities():
    x, eps = _random_pairs(10000, 2)
    mu = 1 / ALPHA
    p = L.MuParams(mu)
    got = np.abs(L.mu_law(eps * x, p) - L.mu_law(x, p))
    want = np.array([mmuae_case_oracle(a, e, mu) for a, e in zip(x, eps)])
    assert np.max(np.abs(got - want)) < 1e-12


def test_shifted_mu_law_zero_at_unit_magnitude():
    p = L.MuParams(1000)
    np.testing.assert_allclose(L.mu_law_shifted(np.array([1.0, -1.0]), p), [0.0, 0.0], atol=1e-15)
    assert L.mmuae(np.array([0.5]), np.array([0.5]), p, transform="shifted") == 0.0


# --- loss values ----------------------------------------------------------------

def test_mslae_scalar_example():
    v = L.mslae(np.array([0.1]), np.array([0.2]), P)
    assert v == pytest.approx(math.log(2) / (3.1 * math.log(10)), rel=1e-12)
    assert v == pytest.approx(0.09711, abs=1e-5)


def test_mslae_ratio_constancy_exact():
    vals = {L.mslae(np.array([x]), np.array([2 * x]), P) for x in (0.01, 0.1, 0.5)}
    assert len(vals) == 1


@given(st.floats(-6, 0), st.floats(0.01, 100))
def test_mslae_depends_on_ratio_only(logx, eps):
    x = 10 ** logx
    if x <= ALPHA or eps * x <= ALPHA:
        return
    assert L.mslae(np.array([x]), np.array([eps * x]), P) == pytest.approx(abs(_logb(eps, ALPHA)),
                                                                           rel=1e-10, abs=1e-13)


def test_plain_losses():
    x = np.array([2.0, -4.0])
    eps = 0.25
    assert L.mse(x, eps * x) == pytest.approx(np.mean((1 - eps) ** 2 * x ** 2))
    assert L.mae(x, eps * x) == pytest.approx(np.mean(np.abs((1 - eps) * x)))
    for f in (L.mse, L.mae):
        assert f(x, x) == 0.0
    assert L.mslae(x, x, P) == 0.0
    with pytest.raises(ValueError):
        L.mse(np.zeros(2), np.zeros(3))


# --- gradients -------------------------------------------------------------------

def _fd_check(value, grad, x, xh, h=1e-6):
    g = grad(x, xh)
    for i in range(xh.size):
        e = np.zeros_like(xh)
        e[i] = h
        num = (value(x, xh + e) - value(x, xh - e)) / (2 * h)
        assert g[i] == pytest.approx(num, rel=1e-4, abs=1e-9)


def _safe_pair(rng, n):
    x = rng.uniform(-1, 1, n)
    xh = x * rng.uniform(1.2, 2.0, n) * rng.choice([-1, 1], n)
    xh[np.abs(xh) < 0.01] = 0.05
    return x, xh


def test_mslae_grad_finite_differences(rng):
    x, xh = _safe_pair(rng, 25)
    _fd_check(lambda a, b: L.mslae(a, b, P), lambda a, b: L.mslae_grad(a, b, P), x, xh)


def test_mmuae_grad_finite_differences(rng):
    p = L.MuParams(1000)
    x, xh = _safe_pair(rng, 25)
    _fd_check(lambda a, b: L.mmuae(a, b, p), lambda a, b: L.mmuae_grad(a, b, p), x, xh)


def test_plain_grads_finite_differences(rng):
    x, xh = _safe_pair(rng, 10)
    _fd_check(L.mse, L.mse_grad, x, xh)
    _fd_check(L.mae, L.mae_grad, x, xh)
    np.testing.assert_allclose(L.mse_grad(x, xh), 2 * (xh - x) / x.size)


def test_mslae_grad_zero_in_clip_zone():
    x = np.array([0.5, 0.5])
    xh = np.array([ALPHA / 2, -ALPHA / 3])
    assert np.all(L.mslae_grad(x, xh, P) == 0)


# --- registry -----------------------------------------------------------------------

@pytest.mark.parametrize("name,key,val", [("mslae(-62)", "alpha_db", -62.0), ("mslae", "alpha_db", -62.0),
                                          ("mmuae(1000)", "mu", 1000.0), ("MSE", None, None),
                                          ("mae", None, None)])
def test_make_loss(name, key, val):
    loss = L.make_loss(name)
    if key:
        assert loss.params[key] == pytest.approx(val)
    x = np.array([0.3, -0.2])
    assert loss.value(x, x) == 0.0
    assert loss.grad(x, x).shape == x.shape


def test_make_loss_keyword_and_errors():
    assert L.make_loss("mslae", alpha_db=-40).params["alpha_db"] == -40
    with pytest.raises(ValueError):
        L.make_loss("huber")
    with pytest.raises(ValueError):
        L.make_loss("mslae(-6")

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special, stats

from lpdfm.errors import DomainError
from lpdfm.specfun import (
    RandomStream,
    as_simplex,
    d_a_reg_inc_beta,
    d_a_reg_inc_beta_array,
    log_beta,
    log_beta_array,
    log_sum_exp,
    reg_inc_beta,
    reg_inc_beta_array,
    sample_categorical,
    sample_dirichlet,
    sample_gamma,
    sample_gamma_array,
    shannon_entropy,
)

mpmath.mp.dps = 40


def quad_inc_beta(z, a, b):
    """Adaptive quadrature of the Beta density with algebraic end weights."""
    lb = special.betaln(a, b)
    if z <= 0.5:
        v, _ = integrate.quad(lambda x: (1 - x) ** (b - 1), 0, z, weight="alg", wvar=(a - 1, 0),
                              epsabs=1e-14, epsrel=1e-13, limit=200)
        return v * math.exp(-lb)
    v, _ = integrate.quad(lambda x: x ** (a - 1), z, 1, weight="alg", wvar=(0, b - 1),
                          epsabs=1e-14, epsrel=1e-13, limit=200)
    return 1 - v * math.exp(-lb)


def mp_d_a(z, a, b):
    return float(mpmath.diff(lambda s: mpmath.betainc(s, b, 0, z, regularized=True), a))


# log_beta


@pytest.mark.parametrize("a,b,expected", [(1, 1, 0.0), (2, 3, math.log(1 / 12)), (0.5, 0.5, math.log(math.pi))])
def test_log_beta_examples(a, b, expected):
    assert log_beta(a, b) == pytest.approx(expected, abs=1e-14)


def test_log_beta_relative_error_over_range():
    grid = np.geomspace(1e-3, 1e4, 25)
    A, B = np.meshgrid(grid, grid)
    mine = log_beta_array(A, B)
    ref = np.array([[float(mpmath.log(mpmath.beta(a, b))) for a, b in zip(ra, rb)] for ra, rb in zip(A, B)])
    rel = np.abs(mine - ref) / np.maximum(np.abs(ref), 1e-300)
    # where ln B is near zero the relative bound degenerates; use absolute there
    ok = (rel <= 1e-12) | (np.abs(mine - ref) <= 1e-13)
    assert ok.all()


@pytest.mark.parametrize("bad", [(0, 1), (-1, 2), (1, float("nan")), (float("inf"), 1)])
def test_log_beta_domain(bad):
    with pytest.raises(DomainError):
        log_beta(*bad)


# incomplete beta


@pytest.mark.parametrize("z,a,b,expected", [(0.3, 1, 1, 0.3), (0.5, 2, 2, 0.5), (0.2, 2, 1, 0.04)])
def test_reg_inc_beta_examples(z, a, b, expected):
    assert reg_inc_beta(z, a, b) == pytest.approx(expected, abs=1e-14)


def test_reg_inc_beta_endpoints():
    assert reg_inc_beta(0.0, 2.5, 0.3) == 0.0
    assert reg_inc_beta(1.0, 2.5, 0.3) == 1.0


@pytest.mark.parametrize("z,a,b", [(0.37, 2.4, 3.1), (0.01, 0.05, 30.0), (0.99, 40.0, 0.2), (0.5, 1e-3, 10.0)])
def test_reg_inc_beta_matches_quadrature(z, a, b):
    assert abs(reg_inc_beta(z, a, b) - quad_inc_beta(z, a, b)) < 1e-10


@pytest.mark.parametrize("bad", [(-0.1, 1, 1), (1.1, 1, 1), (0.5, 0, 1), (0.5, 1, -2)])
def test_reg_inc_beta_domain(bad):
    with pytest.raises(DomainError):
        reg_inc_beta(*bad)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 50), st.floats(0.05, 50), st.lists(st.floats(0, 1), min_size=2, max_size=8))
def test_reg_inc_beta_monotone_in_z(a, b, zs):
    zs = np.sort(np.array(zs))
    vals = reg_inc_beta_array(zs, a, b)
    assert np.all(np.diff(vals) >= -1e-15)
    assert np.all((vals >= 0) & (vals <= 1))


# derivative in a


def test_d_a_examples():
    for a, b in [(0.3, 2.0), (5.0, 0.7)]:
        assert d_a_reg_inc_beta(0.0, a, b) == 0.0
        assert d_a_reg_inc_beta(1.0, a, b) == 0.0
    assert d_a_reg_inc_beta(0.5, 1, 1) == pytest.approx(0.5 * math.log(0.5), abs=1e-9)


def test_d_a_against_extended_precision():
    assert d_a_reg_inc_beta(0.37, 2.4, 3.1) == pytest.approx(mp_d_a(0.37, 2.4, 3.1), abs=1e-9)


@pytest.mark.parametrize("z,a,b", [(0.1, 0.2, 0.2), (0.8, 7.0, 1.5), (0.999, 3.0, 3.0), (1e-4, 0.01, 10.0)])
def test_d_a_against_extended_precision_spread(z, a, b):
    assert d_a_reg_inc_beta(z, a, b) == pytest.approx(mp_d_a(z, a, b), abs=1e-8)


def test_d_a_closed_form_b_one():
    # I_z(a, 1) = z^a so the derivative is z^a ln z
    for z in (0.05, 0.3, 0.9):
        for a in (0.2, 1.0, 4.0):
            assert d_a_reg_inc_beta(z, a, 1.0) == pytest.approx(z**a * math.log(z), abs=1e-9)


def test_d_a_non_positive_on_grid():
    z = np.linspace(0.01, 0.99, 15)
    ab = np.geomspace(0.01, 100, 12)
    Z, A, B = np.meshgrid(z, ab, ab, indexing="ij")
    assert np.all(d_a_reg_inc_beta_array(Z, A, B) <= 0.0)


# samplers


def test_random_stream_reproducible():
    a = RandomStream(7, 3).generator.random(5)
    b = RandomStream(7, 3).generator.random(5)
    c = RandomStream(7, 4).generator.random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_spawn_ignores_consumed_draws():
    s1 = RandomStream(11)
    s2 = RandomStream(11)
    s2.generator.random(100)
    assert np.array_equal(s1.spawn("x", 2).generator.random(4), s2.spawn("x", 2).generator.random(4))
    assert not np.array_equal(s1.spawn("x", 2).generator.random(4), s1.spawn("x", 3).generator.random(4))


def test_random_stream_rejects_bad_seed():
    with pytest.raises(DomainError):
        RandomStream(-1)


def test_gamma_moments_and_ks():
    rs = RandomStream(1)
    for shape in (0.01, 0.3, 1.0, 4.5):
        x = sample_gamma_array(np.full(20000, shape), rs)
        assert np.all(x > 0)
        if shape >= 0.3:
            assert stats.kstest(x, stats.gamma(shape).cdf).pvalue > 1e-3
    assert sample_gamma(2.0, rs) > 0
    with pytest.raises(DomainError):
        sample_gamma(0.0, rs)


def test_dirichlet_simplex_and_marginal():
    rs = RandomStream(2)
    alpha = np.array([0.7, 2.0, 0.3, 5.0])
    x = sample_dirichlet(np.broadcast_to(alpha, (100000, 4)), rs)
    assert np.all(x > 0)
    assert np.abs(x.sum(axis=1) - 1).max() < 1e-12
    p = stats.kstest(x[:, 0], stats.beta(alpha[0], alpha.sum() - alpha[0]).cdf).pvalue
    assert p > 1e-3


def test_dirichlet_tiny_concentrations_stay_positive():
    x = sample_dirichlet(np.full((1000, 20), 1e-3), RandomStream(3))
    assert np.all(x > 0)
    assert np.abs(x.sum(axis=1) - 1).max() < 1e-12


def test_dirichlet_domain():
    with pytest.raises(DomainError):
        sample_dirichlet([1.0, 0.0], RandomStream(0))


def test_categorical_frequencies():
    rs = RandomStream(4)
    p = np.array([0.1, 0.6, 0.3])
    counts = np.bincount([sample_categorical(p, rs) for _ in range(6000)], minlength=3)
    assert stats.chisquare(counts, 6000 * p).pvalue > 1e-3


def test_categorical_never_picks_zero_mass():
    rs = RandomStream(5)
    p = np.array([0.0, 1.0, 0.0])
    assert all(sample_categorical(p, rs) == 1 for _ in range(200))


def test_entropy():
    assert shannon_entropy([1, 0, 0]) == 0.0
    assert shannon_entropy(np.full(8, 1 / 8)) == pytest.approx(math.log(8))
    with pytest.raises(DomainError):
        shannon_entropy([0.5, 0.6])


def test_as_simplex_tolerance():
    p = as_simplex([0.5, 0.5 + 5e-10, -1e-13])
    assert p.sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(DomainError):
        as_simplex([0.5, 0.5, -1e-6])


def test_log_sum_exp():
    assert log_sum_exp([0, 0]) == pytest.approx(math.log(2))
    assert log_sum_exp([1000, 1000]) == pytest.approx(1000 + math.log(2))
    ref = float(mpmath.log(mpmath.exp(-3) + mpmath.exp(mpmath.mpf("0.2")) + mpmath.exp(mpmath.mpf("4.1"))))
    assert log_sum_exp([-3, 0.2, 4.1]) == pytest.approx(ref, abs=1e-14)
    assert log_sum_exp([-700, 700]) == pytest.approx(700)
    with pytest.raises(DomainError):
        log_sum_exp([])

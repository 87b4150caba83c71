import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from alohacr.delay_design import (
    DelayModel,
    NaturalDelay,
    monte_carlo_probability,
    nonresolvable_probability,
    relative_delay_density,
    scan_spread,
    triangular_density,
)

TS = 1.0
GRID = np.round(np.arange(0.7, 1.3001, 0.05), 10)
FAMILIES = [NaturalDelay.dirac(), NaturalDelay.gaussian(TS / 20), NaturalDelay.uniform(TS / 10)]


def test_triangular_density_shape():
    f = triangular_density(2.0)
    assert f(0.0) == pytest.approx(0.5)
    assert f(2.0) == 0.0 and f(-2.0) == 0.0 and f(3.0) == 0.0
    assert integrate.quad(f, -2, 2, points=[0])[0] == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        triangular_density(0.0)


def test_triangular_matches_difference_of_uniforms(rng):
    T = 1.3
    x = rng.uniform(0, T, 400_000) - rng.uniform(0, T, 400_000)
    hist, edges = np.histogram(x, bins=26, range=(-T, T), density=True)
    f = triangular_density(T)
    expected = [integrate.quad(f, a, b)[0] / (b - a) for a, b in zip(edges[:-1], edges[1:])]
    np.testing.assert_allclose(hist, expected, atol=0.01)


@pytest.mark.parametrize("nd", FAMILIES[1:])
def test_natural_delay_normalised_and_symmetric(nd):
    lo, hi = -10 * nd.scale, 10 * nd.scale
    pts = list(nd.breakpoints()) or None
    assert integrate.quad(nd.pdf, lo, hi, points=pts, limit=200)[0] == pytest.approx(1.0, abs=1e-6)
    x = np.linspace(-nd.scale, nd.scale, 17)
    np.testing.assert_allclose(nd.pdf(x), nd.pdf(-x))


def test_natural_delay_validation():
    with pytest.raises(ValueError):
        NaturalDelay("cauchy", 1.0)
    with pytest.raises(ValueError):
        NaturalDelay.gaussian(0.0)
    with pytest.raises(ValueError):
        NaturalDelay("dirac", 0.1)


def test_model_validation():
    with pytest.raises(ValueError):
        DelayModel(0.0, TS, TS / 8)
    with pytest.raises(ValueError):
        DelayModel(1.0, TS, 1.5 * TS)
    with pytest.raises(ValueError):
        DelayModel(1.0, TS, 0.0)


def test_density_dirac_is_triangular():
    m = DelayModel(TS, TS, TS / 8)
    x = np.linspace(-1.2, 1.2, 13)
    np.testing.assert_allclose(relative_delay_density(m)(x), triangular_density(TS)(x))


def test_density_small_gaussian_limit_and_symmetry():
    m = DelayModel(TS, TS, TS / 8, NaturalDelay.gaussian(1e-4))
    x = np.linspace(-0.95, 0.95, 11)
    f = relative_delay_density(m)
    np.testing.assert_allclose(f(x), triangular_density(TS)(x), atol=1e-3)
    m2 = DelayModel(0.8, TS, TS / 8, NaturalDelay.uniform(0.3))
    f2 = relative_delay_density(m2)
    np.testing.assert_allclose(f2(x), f2(-x), atol=1e-9)
    assert integrate.quad(f2, -1.2, 1.2, points=[-0.95, -0.65, 0, 0.65, 0.95])[0] == pytest.approx(1.0, abs=1e-6)


def test_dirac_closed_form():
    # window at 0 over the triangle plus the two half-windows at +-Ts that sit inside [-T, T]
    D = TS / 8
    h = D / 2
    expected = (D / TS - h**2 / TS**2) + 2 * h**2 / (2 * TS**2)
    assert nonresolvable_probability(DelayModel(TS, TS, D)) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("nd", FAMILIES)
@pytest.mark.parametrize("T", [0.3, 1.0, 1.7])
def test_quadrature_agrees_with_monte_carlo(nd, T):
    m = DelayModel(T, TS, TS / 8, nd)
    p, se = monte_carlo_probability(m, 400_000, np.random.default_rng(int(T * 10)))
    assert nonresolvable_probability(m) == pytest.approx(p, abs=3 * se)


@given(
    st.floats(0.05, 2.5),
    st.floats(0.01, 0.45),
    st.floats(0.01, 0.45),
    st.sampled_from(FAMILIES),
)
def test_monotone_in_window(T, d1, d2, nd):
    lo, hi = sorted((d1, d2))
    p_lo = nonresolvable_probability(DelayModel(T, TS, lo, nd))
    p_hi = nonresolvable_probability(DelayModel(T, TS, hi, nd))
    assert 0.0 <= p_lo <= p_hi + 1e-9 <= 1.0 + 1e-9


def test_vanishing_window():
    for D in (1e-2, 1e-4, 1e-6):
        p = nonresolvable_probability(DelayModel(TS, TS, D, NaturalDelay.gaussian(0.05)))
        assert p <= 2 * D
    assert nonresolvable_probability(DelayModel(TS, TS, 1e-9)) < 1e-8


@pytest.mark.parametrize("nd", FAMILIES[1:])
def test_no_intentional_delay_limit(nd):
    D = TS / 8
    p = nonresolvable_probability(DelayModel(1e-9, TS, D, nd))
    mass = float(nd.cdf(D / 2) - nd.cdf(-D / 2))
    assert p == pytest.approx(mass, abs=1e-6)
    # intentional delay makes resolvable collisions likelier
    assert nonresolvable_probability(DelayModel(TS, TS, D, nd)) < p


def test_range_extends_for_wide_natural_delay():
    m = DelayModel(0.5, TS, TS / 8, NaturalDelay.gaussian(2.0), n_range=0)
    p, se = monte_carlo_probability(m, 400_000, np.random.default_rng(1))
    assert nonresolvable_probability(m) == pytest.approx(p, abs=3 * se)


@pytest.mark.parametrize("nd", FAMILIES)
def test_local_minimum_at_symbol_interval(nd):
    scan = scan_spread(DelayModel(TS, TS, TS / 8, nd), GRID * TS)
    i = int(np.argmin(np.abs(scan.T - TS)))
    assert scan.P_c[i] < scan.P_c[i - 2] and scan.P_c[i] < scan.P_c[i + 2]
    assert abs(scan.slope_at_Ts) < 1e-3 * scan.P_c_at_Ts / TS
    assert scan.local_min_at_Ts


def test_scan_scales_with_symbol_interval():
    Ts = 8e-7
    scan = scan_spread(DelayModel(Ts, Ts, Ts / 8, NaturalDelay.gaussian(Ts / 20)), GRID * Ts)
    ref = scan_spread(DelayModel(TS, TS, TS / 8, NaturalDelay.gaussian(TS / 20)), GRID * TS)
    np.testing.assert_allclose(scan.P_c, ref.P_c, atol=1e-8)
    assert scan.local_min_at_Ts


def test_scan_requires_straddling_grid():
    m = DelayModel(TS, TS, TS / 8)
    with pytest.raises(ValueError):
        scan_spread(m, [0.8, 0.9])
    with pytest.raises(ValueError):
        scan_spread(m, [1.0])

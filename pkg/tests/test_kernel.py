import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from cuboid_fdot.kernel import (
    C0_MM_PER_PS,
    DeltaQ,
    DomainError,
    GridMismatchError,
    InstrumentResponse,
    InvalidParameterError,
    capital_Q,
    derive_medium,
    f1,
    f2,
    fresnel_reflectance,
    g_axial,
    greens_function,
    h_factor,
    irf_q,
    robin_coefficient,
)

BEEF = derive_medium(0.92, 0.023, 1.37)


def _moments_composite(n_rel, n=10_000):
    # midpoint rule, no knowledge of the critical angle
    mu = (np.arange(n) + 0.5) / n
    R = fresnel_reflectance(mu, n_rel)
    return np.sum(R * mu) / n, np.sum(R * mu**2) / n


# --- medium and boundary coefficient ---------------------------------------


def test_derive_medium_beef_values():
    assert BEEF.D == pytest.approx(0.36232, abs=5e-6)
    assert BEEF.c == pytest.approx(0.21883, abs=5e-6)
    assert BEEF.D == 1.0 / (3 * 0.92)
    assert BEEF.c == C0_MM_PER_PS / 1.37


def test_derive_medium_matched_index():
    m = derive_medium(1.0 / 3.0, 0.0, 1.0)
    assert m.D == pytest.approx(1.0, rel=1e-15)
    assert m.c == C0_MM_PER_PS
    assert m.beta == 1.0 / (2.0 * m.D)


def test_derive_medium_beta_matches_quadrature_oracle():
    m1, m2 = _moments_composite(1.37)
    beta = (1 - 2 * m1) / (1 + m2) / (2 * BEEF.D)
    assert BEEF.beta == pytest.approx(beta, rel=1e-5)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_derive_medium_rejects_nonpositive_scattering(bad):
    with pytest.raises(InvalidParameterError):
        derive_medium(bad, 0.01, 1.4)


def test_fresnel_examples():
    assert np.all(fresnel_reflectance(np.linspace(0, 1, 11), 1.0) == 0)
    assert fresnel_reflectance(1.0, 1.37) == pytest.approx(((1.37 - 1) / 2.37) ** 2, rel=1e-12)
    assert fresnel_reflectance(1.0, 1.37) == pytest.approx(0.0244, abs=1e-4)
    assert fresnel_reflectance(0.3, 1.37) == 1.0


@given(st.floats(0, 1), st.floats(1, 2))
def test_fresnel_in_unit_interval(mu, n):
    r = fresnel_reflectance(mu, n)
    assert 0.0 <= r <= 1.0 + 1e-15
    if n > 1 and mu < np.sqrt(1 - 1 / n**2):
        assert r == 1.0


@pytest.mark.parametrize("mu", [-0.1, 1.1])
def test_fresnel_domain(mu):
    with pytest.raises(DomainError):
        fresnel_reflectance(mu, 1.4)


def test_robin_examples():
    assert robin_coefficient(1.0, 1.0) == 0.5
    m1, m2 = _moments_composite(1.37)
    assert robin_coefficient(1.37, 0.36232) == pytest.approx((1 - 2 * m1) / (1 + m2) / (2 * 0.36232), rel=1e-5)
    assert 0 < robin_coefficient(1.4, 1.0) < 0.5


def test_robin_rejects_nonpositive_D():
    with pytest.raises(InvalidParameterError):
        robin_coefficient(1.4, 0.0)


@pytest.mark.parametrize("n", [1.01, 1.37, 2.0, 5.0, 50.0])
def test_robin_positive_across_indices(n):
    assert robin_coefficient(n, 0.5) > 0


# --- erf-family accuracy ---------------------------------------------------


@pytest.mark.parametrize("x", [-3.0, -0.5, 0.0, 0.3, 1.0, 5.0, 26.0, 300.0, 1e4])
def test_erfcx_against_arbitrary_precision(x):
    mpmath.mp.dps = 50
    ref = mpmath.exp(mpmath.mpf(x) ** 2) * mpmath.erfc(mpmath.mpf(x))
    assert special.erfcx(x) == pytest.approx(float(ref), rel=1e-14)


@pytest.mark.parametrize("x", [-4.0, -1e-3, 1e-8, 0.7, 2.5])
def test_erf_against_arbitrary_precision(x):
    mpmath.mp.dps = 50
    assert special.erf(x) == pytest.approx(float(mpmath.erf(x)), rel=1e-14)


# --- axial factor and Green's function --------------------------------------


def _g_mp(z, zp, t, m):
    mpmath.mp.dps = 50
    z, zp, t = mpmath.mpf(z), mpmath.mpf(zp), mpmath.mpf(t)
    Dct = mpmath.mpf(m.D) * mpmath.mpf(m.c) * t
    beta = mpmath.mpf(m.beta)
    return (
        mpmath.exp(-((z + zp) ** 2) / (4 * Dct))
        + mpmath.exp(-((z - zp) ** 2) / (4 * Dct))
        - 2
        * beta
        * mpmath.sqrt(mpmath.pi * Dct)
        * mpmath.exp(beta * (z + zp) + beta**2 * Dct)
        * mpmath.erfc((z + zp + 2 * beta * Dct) / mpmath.sqrt(4 * Dct))
    )


@pytest.mark.parametrize("z,zp,t", [(0.0, 10.0, 500.0), (0.0, 2.0, 40.0), (3.0, 7.0, 2000.0)])
def test_g_axial_matches_unscaled_formula(z, zp, t):
    assert g_axial(z, zp, t, BEEF) == pytest.approx(float(_g_mp(z, zp, t, BEEF)), rel=1e-12)


@given(st.floats(0, 50), st.floats(0, 50), st.floats(1, 1e4))
def test_g_axial_symmetric_and_nonnegative(z, zp, t):
    a = g_axial(z, zp, t, BEEF)
    assert a == g_axial(zp, z, t, BEEF)
    assert a >= 0


def test_g_axial_small_beta_limit():
    m = derive_medium(0.92, 0.023, 1.0)
    tiny = type(m)(m.mu_s_prime, m.mu_a, m.n_rel, m.D, m.c, 1e-12)
    z, zp, t = 1.0, 4.0, 300.0
    Dct = m.D * m.c * t
    expect = np.exp(-((z + zp) ** 2) / (4 * Dct)) + np.exp(-((z - zp) ** 2) / (4 * Dct))
    assert g_axial(z, zp, t, tiny) == pytest.approx(expect, rel=1e-10)


def test_g_axial_overflow_safe():
    with np.errstate(over="ignore", invalid="ignore"):
        naive = np.exp(BEEF.beta * 1000 + BEEF.beta**2 * BEEF.D * BEEF.c * 1e6) * special.erfc(1e3)
    assert not np.isfinite(naive) or naive == 0
    for zs, t in [(1000.0, 1e6), (1000.0, 1.0), (500.0, 1e3), (0.0, 1e6)]:
        v = g_axial(zs / 2, zs / 2, t, BEEF)
        assert np.isfinite(v) and v >= 0


def test_g_axial_rejects_nonpositive_time():
    with pytest.raises(DomainError):
        g_axial(0, 1, 0.0, BEEF)


def test_greens_reciprocity():
    rng = np.random.default_rng(11)
    r = np.column_stack([rng.uniform(-20, 20, (100, 2)), rng.uniform(0, 20, 100)])
    rp = np.column_stack([rng.uniform(-20, 20, (100, 2)), rng.uniform(0, 20, 100)])
    t = rng.uniform(50, 3000, 100)
    a = greens_function(r, rp, t, BEEF)
    b = greens_function(rp, r, t, BEEF)
    assert np.all(a >= 0)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=0)


def _pde_residual(r, t, h, m):
    """Relative residual of (1/c)dG/dt - D lap G + mu_a G by central differences."""
    src = np.array([1.0, -2.0, 4.0])
    G = lambda p, tt: greens_function(p, src, tt, m)  # noqa: E731
    ht = h * 0.5 / (m.D * m.c)  # time step matched to the diffusive scale of h
    dGdt = (G(r, t + ht) - G(r, t - ht)) / (2 * ht)
    lap = 0.0
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        lap += (G(r + e, t) - 2 * G(r, t) + G(r - e, t)) / h**2
    res = dGdt / m.c - m.D * lap + m.mu_a * G(r, t)
    return abs(res) / (abs(dGdt / m.c) + abs(m.D * lap) + m.mu_a * G(r, t))


@pytest.mark.parametrize("r,t", [((2.0, 0.0, 6.0), 300.0), ((-1.0, -1.0, 2.0), 150.0), ((0.0, 1.0, 9.0), 800.0)])
def test_greens_pde_residual_second_order(r, t):
    r = np.array(r)
    e1 = _pde_residual(r, t, 0.2, BEEF)
    e2 = _pde_residual(r, t, 0.1, BEEF)
    assert e1 < 1e-2
    assert e1 / e2 == pytest.approx(4.0, rel=0.15)


def _robin_residual(x, y, t, h, m):
    src = np.array([0.0, 0.0, 5.0])
    G = lambda z: greens_function(np.array([x, y, z]), src, t, m)  # noqa: E731
    # second-order one-sided derivative at z = 0
    dz = (-3 * G(0.0) + 4 * G(h) - G(2 * h)) / (2 * h)
    return abs(-dz + m.beta * G(0.0)) / (m.beta * G(0.0))


@pytest.mark.parametrize("x,y,t", [(1.0, 0.0, 200.0), (3.0, -2.0, 600.0)])
def test_greens_robin_boundary_residual_decays(x, y, t):
    e1 = _robin_residual(x, y, t, 0.02, BEEF)
    e2 = _robin_residual(x, y, t, 0.01, BEEF)
    assert e1 < 1e-2
    assert e2 < e1
    assert e1 / e2 == pytest.approx(4.0, rel=0.2)


# --- factor functions ------------------------------------------------------


def test_h_factor_examples():
    xd, xs, t, s = 4.0, -3.0, 600.0, 250.0
    centre = (s * xd + (t - s) * xs) / t
    assert h_factor(xd, xs, t, s, centre, BEEF) == 0.0
    assert h_factor(xd, xs, t, s, 1e6, BEEF) == 1.0
    assert h_factor(xd, xs, t, s, -1e6, BEEF) == -1.0
    xs_grid = np.linspace(-20, 20, 101)
    assert np.all(np.diff(h_factor(xd, xs, t, s, xs_grid, BEEF)) >= 0)


@pytest.mark.parametrize("s", [0.0, 600.0, 700.0])
def test_h_factor_domain(s):
    with pytest.raises(DomainError):
        h_factor(0, 1, 600.0, s, 0.0, BEEF)


def _lateral_brute(rho_d, rho_s, t, s, box, m, n=200):
    """Tensor Gauss quadrature of the lateral parts of G(r_d, r'; t-s) G(r', r_s; s)."""
    x1, x2, y1, y2 = box
    nodes, w = np.polynomial.legendre.leggauss(n)
    X = 0.5 * (x2 - x1) * nodes + 0.5 * (x1 + x2)
    Y = 0.5 * (y2 - y1) * nodes + 0.5 * (y1 + y2)
    wx, wy = 0.5 * (x2 - x1) * w, 0.5 * (y2 - y1) * w
    Dc, c = m.D * m.c, m.c
    u = t - s

    def lat(p, q, tt):
        return np.exp(-((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) / (4 * Dc * tt))

    XX, YY = np.meshgrid(X, Y, indexing="ij")
    P = (XX, YY)
    integrand = lat(rho_d, P, u) * lat(P, rho_s, s)
    pref = c * (4 * np.pi * Dc * u) ** -1.5 * c * (4 * np.pi * Dc * s) ** -1.5 * np.exp(-m.mu_a * c * t)
    return pref * wx @ integrand @ wy


@pytest.mark.parametrize(
    "rho_d,rho_s,t,s,box",
    [
        ((0.0, 10.0), (-10.0, -7.32), 600.0, 250.0, (-1.0, 1.0, -2.0, 2.0)),
        ((5.0, 0.0), (-5.0, 3.0), 900.0, 600.0, (-3.0, 0.5, 1.0, 2.5)),
    ],
)
def test_f1_matches_brute_force_quadrature(rho_d, rho_s, t, s, box):
    a = f1(rho_d, rho_s, t, s, *box, BEEF)
    assert a > 0
    assert a == pytest.approx(_lateral_brute(rho_d, rho_s, t, s, box, BEEF), rel=1e-6)


def test_f1_degenerate_and_translation():
    args = ((3.0, 1.0), (-4.0, 2.0), 700.0, 300.0)
    assert f1(*args, 1.0, 1.0, -1.0, 1.0, BEEF) == 0.0
    base = f1(*args, -1.0, 1.0, -1.0, 1.5, BEEF)
    dx, dy = 7.3, -2.1
    moved = f1((3.0 + dx, 1.0 + dy), (-4.0 + dx, 2.0 + dy), 700.0, 300.0, -1 + dx, 1 + dx, -1 + dy, 1.5 + dy, BEEF)
    assert moved == pytest.approx(base, rel=1e-12)
    with pytest.raises(DomainError):
        f1(*args, 2.0, 1.0, 0.0, 1.0, BEEF)


def test_f2_examples():
    t, s = 1000.0, 400.0
    assert f2(t, s, 5.0, 5.0, BEEF) == 0.0
    full = f2(t, s, 0.0, 60.0, BEEF, quad_order=256)
    rng = np.random.default_rng(3)
    for _ in range(20):
        z1, z2 = np.sort(rng.uniform(0, 30, 2))
        part = f2(t, s, z1, z2, BEEF)
        assert 0 <= part <= full
    lo = f2(t, s, 9.9, 12.0, BEEF, quad_order=64)
    hi = f2(t, s, 9.9, 12.0, BEEF, quad_order=512)
    assert abs(lo - hi) / hi < 1e-8


def test_f2_monotone_in_interval():
    t, s = 800.0, 300.0
    vals = [f2(t, s, 10.0 - d, 11.0 + d, BEEF) for d in np.linspace(0, 9, 10)]
    assert np.all(np.diff(vals) >= 0)


def test_f2_rejects_negative_depth():
    with pytest.raises(DomainError):
        f2(800.0, 300.0, -0.5, 2.0, BEEF)


# --- instrument response ---------------------------------------------------


def test_irf_q_identities():
    delta = InstrumentResponse()
    q = irf_q(delta, delta)
    assert q.is_delta
    R = InstrumentResponse("sampled", np.array([0.0, 1.0, 3.0, 2.0, 0.5]), 5.0)
    q = irf_q(delta, R)
    assert np.array_equal(q.samples, R.samples) and q.dt == 5.0


def test_irf_q_box_pulses_triangle():
    dt = 0.25
    t = np.arange(600) * dt
    box = lambda tt: ((tt >= 20) & (tt <= 60)).astype(float)  # noqa: E731
    q = irf_q(InstrumentResponse("sampled", box(t), dt), InstrumentResponse("sampled", box(t), dt))
    # oracle: refined-grid trapezoid of the same convolution
    fine = 0.01
    tf = np.arange(0, t[-1] + fine / 2, fine)
    oracle = np.array([np.trapezoid(box(tk - tf[tf <= tk]) * box(tf[tf <= tk]), tf[tf <= tk]) for tk in t])
    assert np.max(np.abs(q.samples - oracle)) < 0.01 * oracle.max()
    assert np.argmax(q.samples) * dt == pytest.approx(80.0, abs=dt)


def test_irf_q_grid_mismatch():
    a = InstrumentResponse("sampled", np.ones(10), 1.0)
    b = InstrumentResponse("sampled", np.ones(10), 2.0)
    with pytest.raises(GridMismatchError):
        irf_q(a, b)


def test_instrument_response_validation():
    with pytest.raises(InvalidParameterError):
        InstrumentResponse("sampled", np.array([1.0, -1.0]), 1.0)
    with pytest.raises(InvalidParameterError):
        InstrumentResponse("delta", np.array([1.0]))
    with pytest.raises(DomainError):
        InstrumentResponse(tau=-1.0)


def test_capital_Q_delta_marker():
    Q = capital_Q(0.0, InstrumentResponse(), BEEF)
    assert isinstance(Q, DeltaQ) and Q.weight == BEEF.D


def test_capital_Q_closed_form_for_finite_lifetime():
    t = np.linspace(0, 3000, 31)
    Q = capital_Q(t, InstrumentResponse(tau=600.0), BEEF)
    np.testing.assert_allclose(Q, BEEF.D / 600.0 * np.exp(-t / 600.0), rtol=1e-14)


def test_capital_Q_sampled_against_refined_oracle():
    tau, dt = 600.0, 5.0
    pulse = lambda tt: np.exp(-0.5 * ((tt - 150.0) / 30.0) ** 2)  # noqa: E731
    grid = np.arange(600) * dt
    irf = InstrumentResponse("sampled", pulse(grid), dt, tau)
    probe = np.array([100.0, 150.0, 300.0, 800.0, 2000.0])
    Q = capital_Q(probe, irf, BEEF)
    fine = 0.05
    oracle = []
    for tk in probe:
        tp = np.arange(0, tk + fine / 2, fine)
        oracle.append(BEEF.D / tau * np.trapezoid(np.exp(-tp / tau) * pulse(tk - tp), tp))
    oracle = np.array(oracle)
    assert np.max(np.abs(Q - oracle)) < 5e-3 * oracle.max()
    np.testing.assert_allclose(Q[1:], oracle[1:], rtol=5e-3)


def test_capital_Q_tau_zero_sampled_is_scaled_q():
    irf = InstrumentResponse("sampled", np.array([0.0, 2.0, 1.0]), 4.0, 0.0)
    np.testing.assert_allclose(capital_Q(np.array([0.0, 4.0, 8.0]), irf, BEEF), BEEF.D * np.array([0, 2, 1]))


@settings(max_examples=50)
@given(
    st.floats(0.5, 20),
    st.floats(0.5, 20),
    st.floats(200, 3000),
    st.floats(0.05, 0.95),
)
def test_factors_nonnegative(z1, dz, t, frac):
    s = frac * t
    assert f2(t, s, z1, z1 + dz, BEEF) >= 0
    assert f1((0.0, 0.0), (10.0, 5.0), t, s, -1.0, 1.0, z1 - 10, z1 - 10 + dz, BEEF) >= 0

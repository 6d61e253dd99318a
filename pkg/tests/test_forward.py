import warnings

import numpy as np
import pytest
from scipy import integrate

from cuboid_fdot.forward import (
    Cuboid,
    CuboidOperator,
    MeasurementSet,
    NoSignalError,
    QuadConfig,
    QuadratureWarning,
    SourceDetectorPair,
    VoxelField,
    WindowError,
    forward_cuboid,
    forward_voxelized,
    select_window,
    simulate_timeseries,
    topography_integrals,
)
from cuboid_fdot.kernel import DomainError, InstrumentResponse, derive_medium, greens_function, gauss_legendre
from cuboid_fdot.phantom import layout_paper32

BEEF = derive_medium(0.92, 0.023, 1.37)
PAIR = SourceDetectorPair((-10.0, 10.0 - 10.0 * np.sqrt(3)), (0.0, 10.0), 4)
CUB = Cuboid(-1.0, 1.0, -2.0, 2.0, 10.0, 12.0, 0.03)


@pytest.fixture(scope="module")
def peak_times():
    s = simulate_timeseries(CUB, [PAIR], 6.67, 300, BEEF)
    k = int(np.argmax(s.values[0]))
    return 6.67 * np.array([k - 9, k, k + 10])


def test_zero_amplitude_and_degenerate(peak_times):
    assert np.all(forward_cuboid(Cuboid(-1, 1, -1, 1, 9, 11, 0.0), PAIR, peak_times, BEEF) == 0)
    assert np.all(forward_cuboid(Cuboid(1, 1, -1, 1, 9, 11, 0.5), PAIR, peak_times, BEEF) == 0)


def test_cuboid_matches_voxel_oracle(peak_times):
    rng = np.random.default_rng(5)
    for _ in range(3):
        lo = np.array([rng.uniform(-4, 2), rng.uniform(-4, 2), rng.uniform(6, 14)])
        size = rng.uniform(0.5, 2.0, 3)
        c = Cuboid(lo[0], lo[0] + size[0], lo[1], lo[1] + size[1], lo[2], lo[2] + size[2], 0.02)
        a = forward_cuboid(c, PAIR, peak_times, BEEF)
        b = forward_voxelized(VoxelField.from_cuboid(c, 0.1), PAIR, peak_times, BEEF)
        np.testing.assert_allclose(a, b, rtol=1e-3)


def test_voxel_field_from_cuboid_tiles_exactly():
    vf = VoxelField.from_cuboid(Cuboid(-1.03, 0.52, 2.0, 2.35, 5.0, 6.0, 0.2), 0.1)
    assert vf.dims == (16, 4, 10)
    assert vf.total() == pytest.approx(0.2 * 1.55 * 0.35 * 1.0, rel=1e-12)


def test_voxel_empty_and_linear(peak_times):
    vf = VoxelField((-1, -1, 5), 0.25, np.zeros((8, 8, 8)))
    assert np.all(forward_voxelized(vf, PAIR, peak_times, BEEF) == 0)
    rng = np.random.default_rng(0)
    vf = VoxelField((-1, -1, 5), 0.25, rng.uniform(0, 0.05, (8, 8, 8)))
    vf2 = VoxelField((-1, -1, 5), 0.25, 2 * vf.n_values)
    np.testing.assert_allclose(
        forward_voxelized(vf2, PAIR, peak_times, BEEF), 2 * forward_voxelized(vf, PAIR, peak_times, BEEF), rtol=1e-14
    )


def test_single_voxel_point_limit(peak_times):
    r0 = np.array([0.3, -0.4, 9.0])
    w = 0.01
    h = 0.01
    vf = VoxelField(tuple(r0 - h / 2), h, np.full((1, 1, 1), w / h**3))
    got = forward_voxelized(vf, PAIR, peak_times, BEEF)
    # point kernel: D * int_0^t G(r_d, r0; t-s) G(r0, r_s; s) ds, adaptive quadrature
    rd = np.array([*PAIR.rho_d, 0.0])
    rs = np.array([*PAIR.rho_s, 0.0])
    for t, g in zip(peak_times, got):
        val = integrate.quad(
            lambda s: greens_function(rd, r0, t - s, BEEF) * greens_function(r0, rs, s, BEEF),
            0, t, epsabs=0, epsrel=1e-10, limit=200,
        )[0]
        assert g == pytest.approx(BEEF.D * w * val, rel=1e-6)


def test_voxel_rejects_points_above_surface():
    with pytest.raises(DomainError):
        VoxelField((0, 0, -1.0), 0.5, np.ones((2, 2, 2)))


def test_linearity_in_amplitude(peak_times):
    a = forward_cuboid(CUB, PAIR, peak_times, BEEF)
    b = forward_cuboid(Cuboid(-1.0, 1.0, -2.0, 2.0, 10.0, 12.0, 0.09), PAIR, peak_times, BEEF)
    np.testing.assert_allclose(b, 3 * a, rtol=1e-14)


def test_monotone_under_enlargement(peak_times):
    rng = np.random.default_rng(2)
    base = forward_cuboid(CUB, PAIR, peak_times, BEEF)
    for _ in range(10):
        g = rng.uniform(0, 1.5, 6)
        big = Cuboid(CUB.x1 - g[0], CUB.x2 + g[1], CUB.y1 - g[2], CUB.y2 + g[3], CUB.z1 - g[4] * 0.5, CUB.z2 + g[5], CUB.M)
        assert np.all(forward_cuboid(big, PAIR, peak_times, BEEF) >= base)


def test_time_quadrature_self_convergence(peak_times):
    a = forward_cuboid(CUB, PAIR, peak_times, BEEF)
    b = forward_cuboid(CUB, PAIR, peak_times, BEEF, quad=QuadConfig(n_time=96))
    assert np.max(np.abs(a - b) / b) < 1e-6


def test_quadrature_warning_on_coarse_nodes(peak_times):
    with pytest.warns(QuadratureWarning):
        forward_cuboid(CUB, PAIR, peak_times, BEEF, quad=QuadConfig(n_time=4, check=True))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        forward_cuboid(CUB, PAIR, peak_times, BEEF, quad=QuadConfig(check=True))


def test_mirror_symmetry(peak_times):
    target = Cuboid(-1.5, 1.5, -0.7, 2.0, 9.0, 12.0, 0.02)
    pair = SourceDetectorPair((-10.0, 8.0), (6.0, -3.0))
    mirror = SourceDetectorPair((10.0, 8.0), (-6.0, -3.0))
    a = forward_cuboid(target, pair, peak_times, BEEF)
    b = forward_cuboid(target, mirror, peak_times, BEEF)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_finite_lifetime_outer_convolution(peak_times):
    tau = 600.0
    irf = InstrumentResponse(tau=tau)
    t = peak_times[1] + 300.0
    got = forward_cuboid(CUB, PAIR, t, BEEF, irf=irf, quad=QuadConfig(outer_dt=1.0))

    def delta_signal(T):
        return forward_cuboid(CUB, PAIR, T, BEEF) if T > 0 else 0.0

    ref = integrate.quad(lambda s: np.exp(-s / tau) / tau * delta_signal(t - s), 0, t, limit=200, epsrel=1e-8)[0]
    assert got == pytest.approx(ref, rel=1e-3)


def test_sampled_irf_outer_convolution(peak_times):
    dt = 6.67
    grid = dt * np.arange(400)
    samples = np.exp(-0.5 * ((grid - 60.0) / 15.0) ** 2)
    irf = InstrumentResponse("sampled", samples, dt, 0.0)
    t = dt * 120
    got = forward_cuboid(CUB, PAIR, t, BEEF, irf=irf)
    s = grid[grid <= t]
    vals = np.array([forward_cuboid(CUB, PAIR, t - si, BEEF) if t - si > 0 else 0.0 for si in s])
    ref = np.trapezoid(samples[: s.size] * vals, s)
    assert got == pytest.approx(ref, rel=1e-12)


def test_operator_batches_match_single_calls(peak_times):
    pairs = layout_paper32()[:4]
    op = CuboidOperator(pairs, np.vstack([peak_times] * 4), BEEF)
    batch = op(CUB)
    for i, p in enumerate(pairs):
        np.testing.assert_allclose(batch[i], forward_cuboid(CUB, p, peak_times, BEEF), rtol=1e-13)


def test_cuboid_validation():
    with pytest.raises(DomainError):
        Cuboid(1, 0, 0, 1, 1, 2)
    with pytest.raises(DomainError):
        Cuboid(0, 1, 0, 1, 0.0, 2)
    with pytest.raises(DomainError):
        Cuboid(0, 1, 0, 1, 1, 2, -0.1)
    with pytest.raises(DomainError):
        SourceDetectorPair((1, 1), (1, 1))


# --- simulation and windows ------------------------------------------------


@pytest.fixture(scope="module")
def sim32():
    return simulate_timeseries(CUB, layout_paper32(), 6.67, 250, BEEF)


def test_simulation_nonnegative_and_peaks(sim32):
    assert np.all(sim32.values >= 0)
    assert sim32.values.shape == (32, 250)
    assert sim32.times[0] == 0 and sim32.times[1] == pytest.approx(6.67)


def test_deeper_target_peaks_later(sim32):
    deep = Cuboid(CUB.x1, CUB.x2, CUB.y1, CUB.y2, CUB.z1 + 5, CUB.z2 + 5, CUB.M)
    s2 = simulate_timeseries(deep, layout_paper32(), 6.67, 250, BEEF)
    assert np.all(np.argmax(s2.values, axis=1) > np.argmax(sim32.values, axis=1))


def test_deeper_target_peaks_later_voxel_oracle():
    pairs = layout_paper32()[:3]
    c1 = Cuboid(-1, 1, -1, 1, 6, 8, 0.02)
    c2 = Cuboid(-1, 1, -1, 1, 11, 13, 0.02)
    k = [np.argmax(simulate_timeseries(VoxelField.from_cuboid(c, 0.25), pairs, 6.67, 250, BEEF).values, axis=1) for c in (c1, c2)]
    assert np.all(k[1] > k[0])


def test_lateral_translation_invariance(sim32):
    dx, dy = 3.5, -2.25
    moved = Cuboid(CUB.x1 + dx, CUB.x2 + dx, CUB.y1 + dy, CUB.y2 + dy, CUB.z1, CUB.z2, CUB.M)
    pairs = [
        SourceDetectorPair((p.rho_s[0] + dx, p.rho_s[1] + dy), (p.rho_d[0] + dx, p.rho_d[1] + dy), p.index)
        for p in layout_paper32()
    ]
    s2 = simulate_timeseries(moved, pairs, 6.67, 250, BEEF)
    np.testing.assert_allclose(s2.values, sim32.values, rtol=1e-10, atol=1e-12 * sim32.values.max())


def test_simulation_rejects_short_grid():
    with pytest.raises(WindowError):
        simulate_timeseries(CUB, [PAIR], 6.67, 30, BEEF)


def test_select_window_examples():
    series = np.zeros(100)
    series[29] = 1.0  # peak at bin 30
    w = select_window(series, 6.67, 20, 9)
    assert w.k0 == 30
    assert w.t0 == pytest.approx(133.4)
    assert w.times.size == 20
    series = np.zeros(100)
    series[4] = 1.0
    assert select_window(series, 6.67, 20, 10).t0 == 0.0
    series = np.zeros(100)
    series[29] = 1.0
    assert select_window(series, 6.1, 20, 10).t0 == pytest.approx(115.9)


def test_select_window_ties_and_empty():
    s = np.array([0.0, 1.0, 3.0, 3.0, 1.0])
    assert select_window(s, 1.0, 2, 0).k0 == 3
    with pytest.raises(NoSignalError):
        select_window(np.zeros(10), 1.0, 2, 0)


def test_window_outside_grid_raises(sim32):
    with pytest.raises(WindowError):
        sim32.with_windows(400, 9)


def test_topography_integrals(sim32):
    zero = MeasurementSet(sim32.pairs, sim32.times, np.zeros_like(sim32.values), BEEF)
    assert np.all(topography_integrals(zero) == 0)
    I = topography_integrals(sim32)
    assert I.shape == (32,)
    ref = [np.trapezoid(v, sim32.times) for v in sim32.values]
    np.testing.assert_allclose(I, ref, rtol=1e-14)
    # uniform grid: interior samples carry equal weight, so permuting them is harmless
    perm = sim32.values.copy()
    perm[:, 1:-1] = perm[:, 1:-1][:, ::-1]
    shuffled = MeasurementSet(sim32.pairs, sim32.times, perm, BEEF)
    np.testing.assert_allclose(topography_integrals(shuffled), I, rtol=1e-12)
    partial = topography_integrals(sim32, T=sim32.times[100])
    assert np.all(partial <= I)
    with pytest.raises(WindowError):
        topography_integrals(sim32, T=1e6)


def test_gauss_legendre_nodes_symmetric():
    x, w = gauss_legendre(48)
    np.testing.assert_allclose(x + x[::-1], 1.0, atol=1e-15)
    assert w.sum() == pytest.approx(1.0, rel=1e-14)

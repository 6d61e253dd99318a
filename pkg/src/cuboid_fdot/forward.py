"""Emission forward operators: factorized cuboid formula and voxel-sum oracle.

Both operators share the same time quadrature. The inner integral over the
source-leg time runs on Gauss-Legendre nodes mapped to (0, T); the outer
convolution with Q collapses analytically for an instantaneous response and
otherwise uses the trapezoid rule on a uniform grid.
"""

from __future__ import annotations

import warnings
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .kernel import (
    DeltaQ,
    DomainError,
    InstrumentResponse,
    OpticalMedium,
    _f1,
    _g,
    capital_Q,
    gauss_legendre,
)

__all__ = [
    "Cuboid",
    "CuboidOperator",
    "MeasurementSet",
    "NoSignalError",
    "QuadConfig",
    "QuadratureWarning",
    "SourceDetectorPair",
    "TimeWindow",
    "VoxelField",
    "WindowError",
    "forward_cuboid",
    "forward_voxelized",
    "oracle_relative_error",
    "random_interior_cuboids",
    "window_sample_times",
    "select_window",
    "simulate_timeseries",
    "topography_integrals",
]


class WindowError(ValueError):
    """Time grid too short for the requested window or peak."""


class NoSignalError(ValueError):
    """Series carries no signal to locate a peak in."""


class QuadratureWarning(RuntimeWarning):
    """Node doubling changed a forward value by more than the tolerance."""


@dataclass(frozen=True)
class Cuboid:
    x1: float
    x2: float
    y1: float
    y2: float
    z1: float
    z2: float
    M: float = 1.0

    def __post_init__(self):
        if self.x1 > self.x2 or self.y1 > self.y2 or self.z1 > self.z2:
            raise DomainError(f"inverted cuboid bounds: {self}")
        if self.z1 <= 0:
            raise DomainError(f"cuboid must lie strictly inside z > 0 (z1={self.z1})")
        if self.M < 0:
            raise DomainError(f"amplitude must be nonnegative (M={self.M})")

    @property
    def center(self) -> tuple[float, float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2), 0.5 * (self.z1 + self.z2))

    @property
    def volume(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1) * (self.z2 - self.z1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2, self.y1, self.y2, self.z1, self.z2, self.M])


@dataclass(frozen=True)
class SourceDetectorPair:
    rho_s: tuple[float, float]
    rho_d: tuple[float, float]
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rho_s", (float(self.rho_s[0]), float(self.rho_s[1])))
        object.__setattr__(self, "rho_d", (float(self.rho_d[0]), float(self.rho_d[1])))
        if self.rho_s == self.rho_d:
            raise DomainError(f"pair {self.index}: source and detector coincide")

    @property
    def midpoint(self) -> tuple[float, float]:
        return (0.5 * (self.rho_s[0] + self.rho_d[0]), 0.5 * (self.rho_s[1] + self.rho_d[1]))

    @property
    def separation(self) -> float:
        return float(np.hypot(self.rho_d[0] - self.rho_s[0], self.rho_d[1] - self.rho_s[1]))


@dataclass(frozen=True)
class TimeWindow:
    t0: float
    dt: float
    n_t: int
    k0: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise WindowError("window spacing must be positive")
        if self.n_t < 1:
            raise WindowError("window needs at least one sample")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_t)


@dataclass(frozen=True)
class QuadConfig:
    """Quadrature settings for the forward operators.

    ``outer_dt`` is the trapezoid spacing of the outer Q convolution when Q
    is a continuous closed form (finite lifetime, instantaneous q).
    """

    n_time: int = 48
    n_z: int = 64
    outer_dt: float = 2.0
    check: bool = False
    check_rtol: float = 1e-6


@dataclass
class VoxelField:
    origin: tuple[float, float, float]
    spacing: tuple[float, float, float]
    n_values: np.ndarray

    def __post_init__(self):
        self.origin = tuple(float(v) for v in self.origin)
        if np.isscalar(self.spacing):
            self.spacing = (float(self.spacing),) * 3
        self.spacing = tuple(float(v) for v in self.spacing)
        self.n_values = np.asarray(self.n_values, dtype=float)
        if self.n_values.ndim != 3:
            raise ValueError("n_values must be a 3-D array")
        if min(self.spacing) <= 0:
            raise ValueError("voxel spacing must be positive")
        if np.any(self.n_values < 0):
            raise ValueError("voxel values must be nonnegative")
        if self.n_values.size and self.axis_centers(2)[0] <= 0:
            raise DomainError("voxel centers must lie in z > 0")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.n_values.shape

    @property
    def voxel_volume(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing[axis] * (np.arange(self.dims[axis]) + 0.5)

    def total(self) -> float:
        """Integral of n over the field (mm^2 for n in 1/mm)."""
        return float(self.n_values.sum() * self.voxel_volume)

    @classmethod
    def from_cuboid(cls, cuboid: Cuboid, spacing: float) -> "VoxelField":
        """Grid whose cells tile the cuboid exactly, with pitch at most ``spacing``."""
        lo = np.array([cuboid.x1, cuboid.y1, cuboid.z1])
        size = np.array([cuboid.x2, cuboid.y2, cuboid.z2]) - lo
        dims = np.maximum(np.ceil(size / spacing - 1e-9).astype(int), 1)
        return cls(tuple(lo), tuple(size / dims), np.full(tuple(dims), cuboid.M))


@dataclass
class MeasurementSet:
    """Per-pair emission series on a common uniform time grid.

    ``values[i, k]`` is the signal of pair ``i`` at ``times[k]``. ``windows``
    holds the per-pair fitting windows once selected.
    """

    pairs: list[SourceDetectorPair]
    times: np.ndarray
    values: np.ndarray
    medium: OpticalMedium
    irf: InstrumentResponse = field(default_factory=InstrumentResponse)
    windows: list[TimeWindow] | None = None
    scale: float = 1.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.pairs), self.times.size):
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.pairs)} pairs x {self.times.size} times"
            )
        if self.windows is not None and len(self.windows) != len(self.pairs):
            raise ValueError("one window per pair required")

    @property
    def dt(self) -> float:
        if self.times.size < 2:
            raise WindowError("time grid needs at least two samples")
        return float(self.times[1] - self.times[0])

    def window_index(self, w: TimeWindow) -> np.ndarray:
        start = int(round((w.t0 - self.times[0]) / self.dt))
        idx = start + np.arange(w.n_t)
        if start < 0 or idx[-1] >= self.times.size:
            raise WindowError(f"window starting at {w.t0} ps exceeds the recorded grid")
        return idx

    def windowed(self) -> tuple[np.ndarray, np.ndarray]:
        """(times, values) arrays of shape (n_pairs, n_t) for the fitting windows."""
        if self.windows is None:
            raise WindowError("no windows selected")
        idx = np.array([self.window_index(w) for w in self.windows])
        rows = np.arange(len(self.pairs))[:, None]
        return self.times[idx], self.values[rows, idx]

    def with_windows(self, n_t: int, peak_offset: int) -> "MeasurementSet":
        dt = self.dt
        wins = [select_window(v, dt, n_t, peak_offset, t_start=self.times[0]) for v in self.values]
        out = replace(self, windows=wins)
        out.windowed()
        return out


def _pair_geometry(pairs: Sequence[SourceDetectorPair]) -> np.ndarray:
    return np.array([[p.rho_d[0], p.rho_d[1], p.rho_s[0], p.rho_s[1]] for p in pairs], dtype=float).reshape(-1, 4)


def _outer_nodes(t: np.ndarray, medium: OpticalMedium, irf: InstrumentResponse, quad: QuadConfig):
    """Expand sample times into (sample index, travel time T, weight) triples."""
    Q = capital_Q(0.0, irf, medium)
    if isinstance(Q, DeltaQ):
        return np.arange(t.size), t.copy(), np.full(t.size, Q.weight)
    h = irf.dt if not irf.is_delta else quad.outer_dt
    owner, T, w = [], [], []
    for i, ti in enumerate(t):
        m = int(np.floor(ti / h + 1e-9))
        s = h * np.arange(m + 1)
        if ti - s[-1] > 1e-9 * h:
            s = np.append(s, ti)
        if s.size < 2:
            continue
        ds = np.diff(s)
        tw = np.zeros(s.size)
        tw[:-1] += 0.5 * ds
        tw[1:] += 0.5 * ds
        qv = capital_Q(s, irf, medium)
        Ti = ti - s
        keep = (Ti > 0) & (qv != 0)
        owner.append(np.full(keep.sum(), i))
        T.append(Ti[keep])
        w.append((tw * qv)[keep])
    if not owner:
        return np.zeros(0, int), np.zeros(0), np.zeros(0)
    return np.concatenate(owner), np.concatenate(T), np.concatenate(w)


def _dedupe(geom: np.ndarray, T: np.ndarray):
    key = np.column_stack([geom, np.round(T, 9)])
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    return uniq[:, :4], uniq[:, 4], inv.ravel()


def _depth_factor(T: np.ndarray, z1: float, z2: float, medium: OpticalMedium, quad: QuadConfig) -> np.ndarray:
    """f2 at (T, T x_k) for Gauss-Legendre nodes x_k; shape (len(T), n_time)."""
    x, _ = gauss_legendre(quad.n_time)
    xz, wz = gauss_legendre(quad.n_z)
    zn = z1 + (z2 - z1) * xz
    s = T[:, None] * x
    g0 = _g(0.0, zn, medium.Dc * s[..., None], medium.beta)
    # Gauss-Legendre nodes are symmetric, so T - s_k == s_{n-1-k}
    return (z2 - z1) * np.einsum("j,tkj,tkj->tk", wz, g0, g0[:, ::-1, :])


def _lateral_factor(geom: np.ndarray, T: np.ndarray, box, medium: OpticalMedium, quad: QuadConfig) -> np.ndarray:
    x, _ = gauss_legendre(quad.n_time)
    s = T[:, None] * x
    xd, yd, xs, ys = (geom[:, j : j + 1] for j in range(4))
    x1, x2, y1, y2 = box
    return _f1(xd, yd, xs, ys, T[:, None], s, x1, x2, y1, y2, medium)


class CuboidOperator:
    """Factorized cuboid emission for a fixed set of (pair, time) samples.

    Evaluation caches the depth factor by (z1, z2), so perturbing only the
    lateral bounds or the amplitude reuses it.
    """

    def __init__(
        self,
        pairs: Sequence[SourceDetectorPair],
        times,
        medium: OpticalMedium,
        irf: InstrumentResponse | None = None,
        quad: QuadConfig | None = None,
    ):
        self.pairs = list(pairs)
        self.medium = medium
        self.irf = irf if irf is not None else InstrumentResponse()
        self.quad = quad or QuadConfig()
        times = np.asarray(times, dtype=float)
        if times.ndim == 1:
            times = np.broadcast_to(times, (len(self.pairs), times.size))
        if times.shape[0] != len(self.pairs):
            raise ValueError("times must have one row per pair")
        self.shape = times.shape
        t = times.ravel()
        if np.any(t < 0):
            raise DomainError("sample times must be nonnegative")
        geom = np.repeat(_pair_geometry(self.pairs), self.shape[1], axis=0)
        owner, T, w = _outer_nodes(t, medium, self.irf, self.quad)
        self._owner, self._w = owner, w
        pos = T > 0
        self._owner, self._w = owner[pos], w[pos]
        self._geom, self._T, self._inv = _dedupe(geom[owner[pos]], T[pos])
        self._Tu, self._Tinv = np.unique(self._T, return_inverse=True)
        self._f2_cache: OrderedDict = OrderedDict()
        self._x, self._wx = gauss_legendre(self.quad.n_time)

    def _f2(self, z1: float, z2: float) -> np.ndarray:
        key = (z1, z2)
        hit = self._f2_cache.get(key)
        if hit is None:
            hit = _depth_factor(self._Tu, z1, z2, self.medium, self.quad)
            self._f2_cache[key] = hit
            if len(self._f2_cache) > 16:
                self._f2_cache.popitem(last=False)
        else:
            self._f2_cache.move_to_end(key)
        return hit

    def kernel(self, cuboid: Cuboid) -> np.ndarray:
        """Unit-amplitude inner integral K(T) at the deduplicated nodes."""
        if self._T.size == 0:
            return np.zeros(0)
        box = (cuboid.x1, cuboid.x2, cuboid.y1, cuboid.y2)
        lat = _lateral_factor(self._geom, self._T, box, self.medium, self.quad)
        dep = self._f2(cuboid.z1, cuboid.z2)[self._Tinv]
        return self._T * ((lat * dep) @ self._wx)

    def __call__(self, cuboid: Cuboid) -> np.ndarray:
        out = np.zeros(self.shape[0] * self.shape[1])
        if cuboid.M != 0 and self._T.size:
            K = self.kernel(cuboid)
            np.add.at(out, self._owner, self._w * K[self._inv])
            out *= cuboid.M
        return out.reshape(self.shape)


def _check_convergence(value, refine, quad: QuadConfig, what: str):
    fine = refine(replace(quad, n_time=2 * quad.n_time, check=False))
    scale = np.maximum(np.abs(fine), np.finfo(float).tiny)
    err = np.max(np.abs(value - fine) / scale) if np.size(fine) else 0.0
    if err > quad.check_rtol:
        warnings.warn(
            f"{what}: time-quadrature node doubling changed the result by {err:.2e} (relative)",
            QuadratureWarning,
            stacklevel=3,
        )


def forward_cuboid(
    cuboid: Cuboid,
    pair: SourceDetectorPair,
    t,
    medium: OpticalMedium,
    irf: InstrumentResponse | None = None,
    quad: QuadConfig | None = None,
):
    """Emission U_m at times ``t`` from a uniform cuboid target."""
    quad = quad or QuadConfig()
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(~(t_arr > 0)):
        raise DomainError("forward evaluation needs t > 0")
    run = lambda q: CuboidOperator([pair], t_arr, medium, irf, q)(cuboid)[0]  # noqa: E731
    value = run(quad)
    if quad.check:
        _check_convergence(value, run, quad, "forward_cuboid")
    return value.reshape(np.shape(t))[()]


def _voxel_kernel(field: VoxelField, geom: np.ndarray, T: np.ndarray, medium: OpticalMedium, quad: QuadConfig, chunk: int = 128):
    """Voxel midpoint sum of int_0^T G(r_d, r'; T-s') G(r', r_s; s') ds'."""
    x, w = gauss_legendre(quad.n_time)
    xc, yc, zc = (field.axis_centers(a) for a in range(3))
    n = field.n_values
    # trim empty slabs of the bounding box
    nz_x = np.flatnonzero(n.any(axis=(1, 2)))
    nz_y = np.flatnonzero(n.any(axis=(0, 2)))
    nz_z = np.flatnonzero(n.any(axis=(0, 1)))
    out = np.zeros(T.size)
    if nz_x.size == 0:
        return out
    sx, sy, sz = (slice(a[0], a[-1] + 1) for a in (nz_x, nz_y, nz_z))
    n = n[sx, sy, sz]
    xc, yc, zc = xc[sx], yc[sy], zc[sz]
    nx, ny, nz = n.shape
    Dc, beta = medium.Dc, medium.beta
    for lo in range(0, T.size, chunk):
        sl = slice(lo, lo + chunk)
        Tc = T[sl][:, None]
        s = Tc * x  # source leg
        u = Tc - s  # detector leg
        g = geom[sl]
        xd, yd, xs, ys = (g[:, j, None, None] for j in range(4))
        four_u = 4.0 * Dc * u[..., None]
        four_s = 4.0 * Dc * s[..., None]
        X = np.exp(-((xd - xc) ** 2) / four_u - (xc - xs) ** 2 / four_s)
        Y = np.exp(-((yd - yc) ** 2) / four_u - (yc - ys) ** 2 / four_s)
        Z = _g(0.0, zc, Dc * u[..., None], beta) * _g(zc, 0.0, Dc * s[..., None], beta)
        pref = medium.c**2 * (4.0 * np.pi * Dc) ** -3 * (u * s) ** -1.5 * np.exp(-medium.mu_a * medium.c * Tc)
        m = X.shape[0] * X.shape[1]
        P = (X.reshape(m, nx) @ n.reshape(nx, ny * nz)).reshape(m, ny, nz)
        P = np.einsum("mjl,mj->ml", P, Y.reshape(m, ny))
        S = np.einsum("ml,ml->m", P, Z.reshape(m, nz)).reshape(X.shape[:2])
        out[sl] = Tc[:, 0] * np.sum(pref * S * w, axis=1)
    return out * field.voxel_volume


def _voxel_signal(field: VoxelField, pairs, times: np.ndarray, medium, irf, quad) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    shape = times.shape
    t = times.ravel()
    geom = np.repeat(_pair_geometry(pairs), shape[1], axis=0)
    owner, T, w = _outer_nodes(t, medium, irf, quad)
    pos = T > 0
    owner, T, w = owner[pos], T[pos], w[pos]
    ug, uT, inv = _dedupe(geom[owner], T)
    K = _voxel_kernel(field, ug, uT, medium, quad)
    out = np.zeros(t.size)
    np.add.at(out, owner, w * K[inv])
    return out.reshape(shape)


def forward_voxelized(
    field: VoxelField,
    pair: SourceDetectorPair,
    t,
    medium: OpticalMedium,
    irf: InstrumentResponse | None = None,
    quad: QuadConfig | None = None,
):
    """Emission U_m at times ``t`` from a voxelized fluorophore field."""
    irf = irf if irf is not None else InstrumentResponse()
    quad = quad or QuadConfig()
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(~(t_arr > 0)):
        raise DomainError("forward evaluation needs t > 0")
    return _voxel_signal(field, [pair], t_arr[None, :], medium, irf, quad)[0].reshape(np.shape(t))[()]


Target = Union[Cuboid, VoxelField]


def simulate_timeseries(
    target: Target,
    pairs: Sequence[SourceDetectorPair],
    dt: float,
    n_bins: int,
    medium: OpticalMedium,
    irf: InstrumentResponse | None = None,
    quad: QuadConfig | None = None,
) -> MeasurementSet:
    """Noise-free series on the grid (k-1)*dt, k = 1..n_bins, for every pair.

    Raises :class:`WindowError` if any pair peaks on the last bin.
    """
    if not dt > 0:
        raise WindowError("dt must be positive")
    irf = irf if irf is not None else InstrumentResponse()
    quad = quad or QuadConfig()
    times = dt * np.arange(n_bins)
    grid = np.broadcast_to(times, (len(pairs), n_bins))
    if isinstance(target, Cuboid):
        values = CuboidOperator(pairs, grid, medium, irf, quad)(target)
    else:
        values = _voxel_signal(target, pairs, grid, medium, irf, quad)
    peaks = np.argmax(values, axis=1)
    for p, k in zip(pairs, peaks):
        if k == n_bins - 1:
            raise WindowError(f"pair {p.index}: emission still rising at the last bin; increase n_bins")
    return MeasurementSet(list(pairs), times, values, medium, irf)


def select_window(series, dt: float, n_t: int, peak_offset: int, t_start: float = 0.0) -> TimeWindow:
    """Fitting window starting ``peak_offset`` bins before the peak.

    The peak bin ``k0`` is 1-based (the peak lies at ``(k0-1)*dt``); the
    window start ``(k0-1-peak_offset)*dt`` is clamped at the first bin.
    """
    series = np.asarray(series, dtype=float)
    if series.size == 0 or not np.any(series > 0):
        raise NoSignalError("series has no positive samples")
    k0 = int(np.argmax(series)) + 1  # argmax returns the earliest maximum
    start = max(k0 - 1 - peak_offset, 0)
    return TimeWindow(t_start + start * dt, dt, n_t, k0)


def topography_integrals(measurements: MeasurementSet, T: float | None = None) -> np.ndarray:
    """Trapezoidal time integral of every pair's series over [t_first, T]."""
    t = measurements.times
    if T is not None:
        if T > t[-1] + 1e-9 * max(abs(T), 1.0):
            raise WindowError(f"series end at {t[-1]} ps, before T = {T} ps")
        keep = t <= T + 1e-9 * max(abs(T), 1.0)
    else:
        keep = slice(None)
    return np.trapezoid(measurements.values[:, keep], t[keep], axis=1)


def random_interior_cuboids(rng: np.random.Generator, n: int) -> list[Cuboid]:
    """Cuboids well inside the medium, under the central part of the probe area."""
    out = []
    for _ in range(n):
        center = np.array([rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(7, 14)])
        half = rng.uniform(0.4, 2.0, 3)
        lo, hi = center - half, center + half
        out.append(Cuboid(lo[0], hi[0], lo[1], hi[1], lo[2], hi[2], float(rng.uniform(0.005, 0.05))))
    return out


def oracle_relative_error(
    cuboid: Cuboid,
    pairs: Sequence[SourceDetectorPair],
    t,
    medium: OpticalMedium,
    spacing: float = 0.1,
    quad: QuadConfig | None = None,
) -> float:
    """Max |factorized - voxelized| / |voxelized| over pairs and times.

    ``t`` is shared by all pairs (1-D) or given per pair (one row each).
    """
    t = np.asarray(t, dtype=float)
    rows = np.broadcast_to(t, (len(pairs), t.shape[-1]))
    a = CuboidOperator(pairs, rows, medium, quad=quad)(cuboid)
    vf = VoxelField.from_cuboid(cuboid, spacing)
    b = np.array([forward_voxelized(vf, p, r, medium, quad=quad) for p, r in zip(pairs, rows)])
    return float(np.max(np.abs(a - b) / np.abs(b)))


def window_sample_times(cuboid: Cuboid, pairs: Sequence[SourceDetectorPair], medium: OpticalMedium, dt: float = 6.67,
                        n_bins: int = 400) -> np.ndarray:
    """Per-pair (peak - 9, peak, peak + 10) bin times of the noise-free series."""
    series = simulate_timeseries(cuboid, pairs, dt, n_bins, medium)
    k = np.argmax(series.values, axis=1)
    return dt * (k[:, None] + np.array([-9, 0, 10]))

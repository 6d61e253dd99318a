"""Closed-form diffusion kernels for a half-space with a Robin boundary.

Units are fixed throughout the package: lengths in mm, times in ps,
coefficients in 1/mm. The vacuum light speed is ``C0_MM_PER_PS``.

Functions:
    derive_medium: OpticalMedium from optical coefficients
    fresnel_reflectance: unpolarized internal-incidence Fresnel reflectance
    robin_coefficient: boundary coefficient beta from Fresnel moments
    g_axial: axial factor of the half-space Green's function
    greens_function: full time-domain Green's function
    h_factor, f1, f2: factors of the cuboid emission integrand
    irf_q, capital_Q: instrument-response chain
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, special

__all__ = [
    "C0_MM_PER_PS",
    "DeltaQ",
    "InstrumentResponse",
    "OpticalMedium",
    "capital_Q",
    "derive_medium",
    "f1",
    "f2",
    "fresnel_moments",
    "fresnel_reflectance",
    "g_axial",
    "gauss_legendre",
    "greens_function",
    "h_factor",
    "irf_q",
    "robin_coefficient",
]

C0_MM_PER_PS = 0.299792458


class InvalidParameterError(ValueError):
    """Physically meaningless optical or geometric parameter."""


class DomainError(ValueError):
    """Argument outside the domain of a kernel function."""


class GridMismatchError(ValueError):
    """Sampled profiles do not share a time grid."""


@dataclass(frozen=True)
class OpticalMedium:
    mu_s_prime: float
    mu_a: float
    n_rel: float
    D: float
    c: float
    beta: float

    @property
    def Dc(self) -> float:
        return self.D * self.c


def derive_medium(mu_s_prime: float, mu_a: float, n_rel: float) -> OpticalMedium:
    """Build an :class:`OpticalMedium` from (mu_s', mu_a, n_rel).

    ``D = 1/(3 mu_s')``, ``c = c0/n_rel`` and ``beta`` follows from the
    Fresnel moments of the boundary.
    """
    if not mu_s_prime > 0:
        raise InvalidParameterError(f"mu_s_prime must be positive, got {mu_s_prime}")
    if not mu_a >= 0:
        raise InvalidParameterError(f"mu_a must be nonnegative, got {mu_a}")
    if not n_rel >= 1:
        raise InvalidParameterError(f"n_rel must be >= 1, got {n_rel}")
    D = 1.0 / (3.0 * mu_s_prime)
    c = C0_MM_PER_PS / n_rel
    beta = robin_coefficient(n_rel, D)
    return OpticalMedium(float(mu_s_prime), float(mu_a), float(n_rel), D, c, beta)


def fresnel_reflectance(mu, n_rel: float):
    """Unpolarized Fresnel reflectance for light leaving a medium of index n_rel.

    ``mu`` is the cosine of the incidence angle inside the medium. Beyond the
    critical angle the reflectance is 1.
    """
    mu = np.asarray(mu, dtype=float)
    if np.any((mu < 0) | (mu > 1)) or np.any(np.isnan(mu)):
        raise DomainError("mu must lie in [0, 1]")
    if n_rel < 1:
        raise DomainError(f"n_rel must be >= 1, got {n_rel}")
    if n_rel == 1.0:
        return np.zeros_like(mu)[()]
    sin_t2 = n_rel**2 * (1.0 - mu**2)
    tir = sin_t2 >= 1.0
    cos_t = np.sqrt(np.clip(1.0 - sin_t2, 0.0, None))
    with np.errstate(invalid="ignore", divide="ignore"):
        rs = (n_rel * mu - cos_t) / (n_rel * mu + cos_t)
        rp = (mu - n_rel * cos_t) / (mu + n_rel * cos_t)
    r = 0.5 * (rs**2 + rp**2)
    return np.where(tir, 1.0, r)[()]


@lru_cache(maxsize=64)
def fresnel_moments(n_rel: float) -> tuple[float, float]:
    """Return (int_0^1 R mu dmu, int_0^1 R mu^2 dmu)."""
    if n_rel == 1.0:
        return 0.0, 0.0
    mu_c = np.sqrt(1.0 - 1.0 / n_rel**2)
    # R == 1 below the critical cosine; integrate the smooth branch adaptively
    m1 = mu_c**2 / 2.0 + integrate.quad(
        lambda m: fresnel_reflectance(m, n_rel) * m, mu_c, 1.0, epsabs=1e-15, epsrel=1e-12, limit=200
    )[0]
    m2 = mu_c**3 / 3.0 + integrate.quad(
        lambda m: fresnel_reflectance(m, n_rel) * m * m, mu_c, 1.0, epsabs=1e-15, epsrel=1e-12, limit=200
    )[0]
    return float(m1), float(m2)


def robin_coefficient(n_rel: float, D: float) -> float:
    """Robin coefficient ``beta = (1 - 2 m1) / (1 + m2) / (2 D)``."""
    if not D > 0:
        raise InvalidParameterError(f"D must be positive, got {D}")
    m1, m2 = fresnel_moments(float(n_rel))
    num = 1.0 - 2.0 * m1
    if num <= 0:
        raise InvalidParameterError(f"index mismatch n_rel={n_rel} gives nonpositive beta")
    return num / (1.0 + m2) / (2.0 * D)


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise DomainError("time must be strictly positive")
    return t


def _g(z, zp, Dct, beta):
    four = 4.0 * Dct
    zsum = z + zp
    image = np.exp(-zsum**2 / four)
    direct = np.exp(-((z - zp) ** 2) / four)
    # exp(a) erfc(b) == erfcx(b) exp(a - b^2); here a - b^2 = -(z+z')^2 / (4Dct)
    corr = 2.0 * beta * np.sqrt(np.pi * Dct) * special.erfcx((zsum + 2.0 * beta * Dct) / np.sqrt(four))
    return direct + image * (1.0 - corr)


def g_axial(z, z_p, t, medium: OpticalMedium):
    """Axial factor g(z, z'; t) of the Robin half-space Green's function."""
    t = _check_time(t)
    z = np.asarray(z, dtype=float)
    z_p = np.asarray(z_p, dtype=float)
    if np.any(z < 0) or np.any(z_p < 0):
        raise DomainError("depths must be nonnegative")
    return _g(z, z_p, medium.Dc * t, medium.beta)[()]


def greens_function(r, r_p, t, medium: OpticalMedium):
    """Time-domain Green's function G(r, r'; t) in 1/mm^3.

    ``r`` and ``r_p`` are (..., 3) arrays of (x, y, z) with z >= 0.
    """
    t = _check_time(t)
    r = np.asarray(r, dtype=float)
    r_p = np.asarray(r_p, dtype=float)
    Dct = medium.Dc * t
    lateral = (r[..., 0] - r_p[..., 0]) ** 2 + (r[..., 1] - r_p[..., 1]) ** 2
    if np.any(r[..., 2] < 0) or np.any(r_p[..., 2] < 0):
        raise DomainError("points must lie in the half-space z >= 0")
    pref = medium.c * (4.0 * np.pi * Dct) ** -1.5 * np.exp(-medium.mu_a * medium.c * t)
    return (pref * np.exp(-lateral / (4.0 * Dct)) * _g(r[..., 2], r_p[..., 2], Dct, medium.beta))[()]


def _check_split(t, s):
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(~(s > 0)) or np.any(~(s < t)):
        raise DomainError("require 0 < s < t")
    return t, s


def _h(xd, xs, t, s, x, Dc):
    centre = (s * xd + (t - s) * xs) / t
    return special.erf(np.sqrt(t / (4.0 * Dc * (t - s) * s)) * (x - centre))


def h_factor(x_d, x_s, t, s, x, medium: OpticalMedium):
    """erf-valued lateral factor; ``s`` is the source-to-target travel time."""
    t, s = _check_split(t, s)
    return _h(np.asarray(x_d, float), np.asarray(x_s, float), t, s, np.asarray(x, float), medium.Dc)[()]


def _f1(xd, yd, xs, ys, t, s, x1, x2, y1, y2, medium):
    Dc = medium.Dc
    pref = np.exp(-medium.mu_a * medium.c * t) / (64.0 * np.pi**2 * medium.D**2 * t * np.sqrt((t - s) * s))
    lateral = np.exp(-((xd - xs) ** 2 + (yd - ys) ** 2) / (4.0 * Dc * t))
    hx = _h(xd, xs, t, s, x2, Dc) - _h(xd, xs, t, s, x1, Dc)
    hy = _h(yd, ys, t, s, y2, Dc) - _h(yd, ys, t, s, y1, Dc)
    return pref * lateral * hx * hy


def f1(rho_d, rho_s, t, s, x1, x2, y1, y2, medium: OpticalMedium):
    """Lateral factor of the cuboid emission integrand.

    This is the x-y integral of the two lateral Gaussians over the rectangle
    [x1, x2] x [y1, y2], including the time prefactors of both Green's
    functions. ``t`` is the total travel time, ``s`` the source leg.
    """
    t, s = _check_split(t, s)
    if x1 > x2 or y1 > y2:
        raise DomainError("slab bounds must satisfy x1 <= x2 and y1 <= y2")
    xd, yd = rho_d
    xs, ys = rho_s
    return _f1(xd, yd, xs, ys, t, s, x1, x2, y1, y2, medium)[()]


@lru_cache(maxsize=32)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on (0, 1)."""
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


def f2(t, s, z1: float, z2: float, medium: OpticalMedium, quad_order: int = 64):
    """Depth factor: integral over z' in [z1, z2] of g(0,z';t-s) g(z',0;s)."""
    t, s = _check_split(t, s)
    if z1 < 0:
        raise DomainError("target must lie in the half-space (z1 >= 0)")
    if z2 < z1:
        raise DomainError("require z1 <= z2")
    x, w = gauss_legendre(quad_order)
    zn = z1 + (z2 - z1) * x
    Dc = medium.Dc
    a = _g(0.0, zn, Dc * (t - s)[..., None], medium.beta)
    b = _g(zn, 0.0, Dc * s[..., None], medium.beta)
    return ((z2 - z1) * np.sum(w * a * b, axis=-1))[()]


@dataclass(frozen=True)
class InstrumentResponse:
    """Temporal profile: a delta, or nonnegative samples on a uniform grid.

    ``tau`` is the fluorescence lifetime carried along with the profile.
    """

    kind: str = "delta"
    samples: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dt: float = 0.0
    tau: float = 0.0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        object.__setattr__(self, "samples", samples)
        if self.kind not in ("delta", "sampled"):
            raise InvalidParameterError(f"unknown response kind {self.kind!r}")
        if self.tau < 0:
            raise DomainError(f"tau must be nonnegative, got {self.tau}")
        if self.kind == "delta" and samples.size:
            raise InvalidParameterError("delta response carries no samples")
        if self.kind == "sampled":
            if samples.ndim != 1 or samples.size == 0:
                raise InvalidParameterError("sampled response needs a 1-D sample array")
            if np.any(samples < 0):
                raise InvalidParameterError("response samples must be nonnegative")
            if not self.dt > 0:
                raise InvalidParameterError("sampled response needs dt > 0")

    @property
    def is_delta(self) -> bool:
        return self.kind == "delta"

    def __eq__(self, other):
        if not isinstance(other, InstrumentResponse):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.dt == other.dt
            and self.tau == other.tau
            and np.array_equal(self.samples, other.samples)
        )

    def __hash__(self):
        return hash((self.kind, self.dt, self.tau, self.samples.tobytes()))


def _causal_trapz(a: np.ndarray, b: np.ndarray, dt: float) -> np.ndarray:
    n = min(a.size, b.size)
    full = np.convolve(a[:n], b[:n])[:n]
    # trapezoid: drop half of the two endpoint products
    out = full - 0.5 * (a[0] * b[:n] + b[0] * a[:n])
    out[0] = 0.0
    return dt * out


def irf_q(source: InstrumentResponse, detector: InstrumentResponse, tau: float = 0.0) -> InstrumentResponse:
    """Instrument response q = R * f (causal convolution, trapezoidal)."""
    if source.is_delta and detector.is_delta:
        return InstrumentResponse("delta", tau=tau)
    if source.is_delta:
        return InstrumentResponse("sampled", detector.samples, detector.dt, tau)
    if detector.is_delta:
        return InstrumentResponse("sampled", source.samples, source.dt, tau)
    if not np.isclose(source.dt, detector.dt, rtol=1e-12, atol=0):
        raise GridMismatchError(f"source dt {source.dt} != detector dt {detector.dt}")
    q = _causal_trapz(source.samples, detector.samples, source.dt)
    return InstrumentResponse("sampled", np.clip(q, 0.0, None), source.dt, tau)


@dataclass(frozen=True)
class DeltaQ:
    """Q(t) = weight * delta(t); collapses the outer time integral."""

    weight: float


def capital_Q(t, irf: InstrumentResponse, medium: OpticalMedium):
    """Fluorescence-convolved response Q(t) = (D/tau) int e^{-t'/tau} q(t-t') dt'.

    Returns a :class:`DeltaQ` when both the lifetime and q are instantaneous.
    For sampled q the values are computed on the q grid by the trapezoid rule
    and linearly interpolated at ``t``; Q vanishes past the end of the record.
    """
    tau = irf.tau
    if tau < 0:
        raise DomainError(f"tau must be nonnegative, got {tau}")
    D = medium.D
    if irf.is_delta and tau == 0:
        return DeltaQ(D)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("Q is defined for t >= 0")
    if irf.is_delta:
        return (D / tau * np.exp(-t / tau))[()]
    grid = np.arange(irf.samples.size) * irf.dt
    if tau == 0:
        values = D * irf.samples
    else:
        kern = np.exp(-grid / tau) / tau
        values = D * _causal_trapz(kern, irf.samples, irf.dt)
    return np.interp(t, grid, values, right=0.0)[()]

"""Synthetic scenes: targets, source-detector layouts and measurement noise.

Noise uses numpy's ``Generator`` on the PCG64 bit generator, which produces
the same stream on every platform for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .forward import MeasurementSet, SourceDetectorPair, VoxelField

__all__ = [
    "EllipsoidTarget",
    "NoiseSpec",
    "PAPER_ELLIPSOID",
    "ResolutionError",
    "add_noise",
    "layout_beef16",
    "layout_paper32",
    "voxelize_ellipsoid",
]

SQRT3 = np.sqrt(3.0)


class ResolutionError(ValueError):
    """Voxel spacing too coarse for the target."""


@dataclass(frozen=True)
class EllipsoidTarget:
    center: tuple[float, float, float]
    semiaxes: tuple[float, float, float]
    n_value: float

    def __post_init__(self):
        if min(self.semiaxes) <= 0:
            raise ValueError("semiaxes must be positive")
        if self.center[2] - self.semiaxes[2] <= 0:
            raise ValueError("ellipsoid must lie strictly inside z > 0")
        if self.n_value < 0:
            raise ValueError("n_value must be nonnegative")

    @property
    def total(self) -> float:
        """Analytic integral of n over the ellipsoid."""
        a, b, c = self.semiaxes
        return self.n_value * 4.0 / 3.0 * np.pi * a * b * c

    def contains(self, x, y, z):
        a, b, c = self.semiaxes
        x0, y0, z0 = self.center
        return ((x - x0) / a) ** 2 + ((y - y0) / b) ** 2 + ((z - z0) / c) ** 2 <= 1.0


PAPER_ELLIPSOID = EllipsoidTarget((0.0, 0.0, 11.0), (1.5, 3.0, 1.5), 0.02)


def voxelize_ellipsoid(target: EllipsoidTarget, spacing: float) -> VoxelField:
    """Voxel grid over the bounding box; cells whose centers lie inside get n_value."""
    if not spacing > 0:
        raise ResolutionError("spacing must be positive")
    if spacing >= min(target.semiaxes):
        raise ResolutionError(f"spacing {spacing} mm is not below the smallest semiaxis {min(target.semiaxes)} mm")
    c = np.asarray(target.center, dtype=float)
    ax = np.asarray(target.semiaxes, dtype=float)
    dims = np.ceil(2.0 * ax / spacing).astype(int)
    origin = c - 0.5 * dims * spacing
    if origin[2] <= 0:
        dims[2] -= 2 * int(np.ceil(-origin[2] / spacing + 1e-12))
        origin[2] = c[2] - 0.5 * dims[2] * spacing
    centers = [origin[a] + spacing * (np.arange(dims[a]) + 0.5) for a in range(3)]
    X, Y, Z = np.meshgrid(*centers, indexing="ij")
    n = np.where(target.contains(X, Y, Z), target.n_value, 0.0)
    return VoxelField(tuple(origin), (spacing,) * 3, n)


_ANCHORS = [(-10, 10), (-10, 0), (-10, -10), (0, -10), (10, -10), (10, 0), (10, 10), (0, 10)]


def layout_paper32() -> list[SourceDetectorPair]:
    """32 pairs: around each anchor, sources at +-10*sqrt(3) in y, detectors at +-10 in x."""
    pairs = []
    for xi, zeta in _ANCHORS:
        for sy in (1.0, -1.0):
            for dx in (-10.0, 10.0):
                pairs.append(
                    SourceDetectorPair((xi, zeta + sy * 10.0 * SQRT3), (xi + dx, zeta), index=len(pairs) + 1)
                )
    return pairs


_BEEF16 = [
    ((-5 - 10 * SQRT3, 0), (-5, 10)),
    ((-5 + 10 * SQRT3, 0), (-5, 10)),
    ((-5 - 10 * SQRT3, 5), (-5, 15)),
    ((-5 + 10 * SQRT3, 5), (-5, 15)),
    ((-10 * SQRT3, 0), (0, 10)),
    ((-10 * SQRT3, 5), (0, 15)),
    ((5 - 10 * SQRT3, 5), (5, -5)),
    ((5 - 10 * SQRT3, 5), (5, 15)),
    ((5 - 10 * SQRT3, 0), (5, 10)),
    ((5 - 10 * SQRT3, -5), (5, 5)),
    ((-10 * SQRT3, -5), (0, 5)),
    ((-10 + 10 * SQRT3, 0), (-10, 10)),
    ((-15 + 10 * SQRT3, 0), (-15, 10)),
    ((-15 + 10 * SQRT3, 5), (-15, -5)),
    ((-15 + 10 * SQRT3, 5), (-15, 15)),
    ((-10 + 10 * SQRT3, 5), (-10, 15)),
]


def layout_beef16() -> list[SourceDetectorPair]:
    """The 16 pairs of the beef holder, in acquisition order."""
    return [SourceDetectorPair(s, d, index=i + 1) for i, (s, d) in enumerate(_BEEF16)]


@dataclass(frozen=True)
class NoiseSpec:
    level: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.level < 0:
            raise ValueError("noise level must be nonnegative")


def add_noise(clean: MeasurementSet, spec: NoiseSpec) -> MeasurementSet:
    """Multiply every sample by (1 + level * eps), eps ~ N(0, 1); clamp at zero."""
    if spec.level == 0:
        return replace(clean, values=clean.values.copy())
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    eps = rng.standard_normal(clean.values.shape)
    noisy = np.clip(clean.values * (1.0 + spec.level * eps), 0.0, None)
    return replace(clean, values=noisy)

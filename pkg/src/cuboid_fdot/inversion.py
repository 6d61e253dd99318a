"""Three-stage cuboid reconstruction driven by a projected Levenberg-Marquardt solver.

Stage 1 picks a boundary region from time-integrated signals, stage 2 fits
a cube (center, edge, amplitude) started inside that region, and stage 3
refines the cube into a cuboid with independent bounds per axis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .forward import Cuboid, CuboidOperator, MeasurementSet, QuadConfig, topography_integrals

__all__ = [
    "BoundsBox",
    "CubicParams",
    "CuboidParams",
    "LMConfig",
    "NoTargetError",
    "PipelineConfig",
    "ReconstructionResult",
    "Region",
    "SingularSystemError",
    "StageFailure",
    "StageResult",
    "TraceEntry",
    "jacobian_fd",
    "lm_solve",
    "reconstruct",
    "residuals",
    "stage1_topography",
    "stage2_cubic",
    "stage3_cuboid",
]

log = logging.getLogger(__name__)

ORDER_EPS = 0.01  # mm; half-gap used when a projection has to reopen a collapsed interval


class NoTargetError(ValueError):
    """No pair carries enough signal to localize a target."""


class SingularSystemError(np.linalg.LinAlgError):
    """Damped normal equations stayed singular up to the damping cap."""


class StageFailure(RuntimeError):
    """A pipeline stage raised; ``partial`` holds the stages completed so far."""

    def __init__(self, message: str, partial: "ReconstructionResult"):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class CubicParams:
    x0: float
    y0: float
    z0: float
    l: float  # noqa: E741
    M: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.z0, self.l, self.M])

    def to_cuboid(self) -> Cuboid:
        h = 0.5 * self.l
        return Cuboid(self.x0 - h, self.x0 + h, self.y0 - h, self.y0 + h, self.z0 - h, self.z0 + h, self.M)


@dataclass(frozen=True)
class CuboidParams:
    x1: float
    x2: float
    y1: float
    y2: float
    z1: float
    z2: float
    M: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2, self.y1, self.y2, self.z1, self.z2, self.M])

    def to_cuboid(self) -> Cuboid:
        return Cuboid(self.x1, self.x2, self.y1, self.y2, self.z1, self.z2, self.M)

    @classmethod
    def from_cubic(cls, p: CubicParams) -> "CuboidParams":
        h = 0.5 * p.l
        return cls(p.x0 - h, p.x0 + h, p.y0 - h, p.y0 + h, p.z0 - h, p.z0 + h, p.M)


_KIND_PARAMS = {"cubic": CubicParams, "cuboid": CuboidParams}


@dataclass(frozen=True)
class BoundsBox:
    """Per-parameter box, plus the coupling rules of the parameterization.

    For ``kind="cubic"`` the edge also obeys ``l <= 2*(z0 - ORDER_EPS)`` so the
    cube stays below the surface. For ``kind="cuboid"`` intervals stay ordered.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    kind: str = "cubic"

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != hi.shape or lo.size != (5 if self.kind == "cubic" else 7):
            raise ValueError(f"bounds have the wrong length for kind {self.kind!r}")
        if np.any(lo >= hi):
            raise ValueError("each lower bound must be below its upper bound")

    @classmethod
    def paper_cubic(cls, lateral: float = 30.0, z_max: float = 30.0, l_max: float = 20.0, M_max: float = 10.0):
        return cls((-lateral, -lateral, 0.0, ORDER_EPS, 0.0), (lateral, lateral, z_max, l_max, M_max), "cubic")

    @classmethod
    def paper_cuboid(cls, lateral: float = 30.0, z_max: float = 40.0, M_max: float = 10.0):
        lo = (-lateral, -lateral, -lateral, -lateral, ORDER_EPS, ORDER_EPS, 0.0)
        hi = (lateral, lateral, lateral, lateral, z_max, z_max, M_max)
        return cls(lo, hi, "cuboid")

    def project(self, p) -> np.ndarray:
        p = np.clip(np.asarray(p, dtype=float), self.lower, self.upper)
        if self.kind == "cubic":
            p[2] = max(p[2], 2.0 * ORDER_EPS)
            p[3] = min(p[3], 2.0 * (p[2] - ORDER_EPS))
        else:
            for a, b in ((0, 1), (2, 3), (4, 5)):
                if p[a] >= p[b]:
                    mid = 0.5 * (p[a] + p[b])
                    if a == 4:
                        mid = max(mid, 2.0 * ORDER_EPS)
                    p[a], p[b] = mid - ORDER_EPS, mid + ORDER_EPS
        return p

    def contains(self, p, tol: float = 1e-12) -> bool:
        p = np.asarray(p, dtype=float)
        if np.any(p < np.asarray(self.lower) - tol) or np.any(p > np.asarray(self.upper) + tol):
            return False
        if self.kind == "cubic":
            return bool(p[3] > 0 and p[2] - 0.5 * p[3] > 0)
        return bool(p[0] < p[1] and p[2] < p[3] and 0 < p[4] < p[5])


@dataclass(frozen=True)
class LMConfig:
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    max_iter: int = 200
    gtol: float = 1e-8
    ftol: float = 1e-8
    xtol: float = 1e-6
    fd_step: float = 1e-4
    lambda_max: float = 1e16

    def __post_init__(self):
        vals = (self.lambda0, self.lambda_up, self.lambda_down, self.max_iter, self.gtol, self.ftol, self.xtol, self.fd_step)
        if min(vals) <= 0:
            raise ValueError("LM settings must all be positive")
        if not self.lambda_up > 1 > self.lambda_down:
            raise ValueError("need lambda_up > 1 > lambda_down")


@dataclass(frozen=True)
class TraceEntry:
    F: float  # objective after this iteration (last proposal if none was accepted)
    lam: float  # damping of the final proposal
    accepted: bool
    params: tuple[float, ...]  # iterate after this iteration
    one_sided: tuple[bool, ...] = ()
    rejected: int = 0  # proposals discarded before the final one


@dataclass
class StageResult:
    params: object
    objective: float
    iterations: int
    trace: list[TraceEntry]
    converged: bool
    message: str = ""

    @property
    def accepted_objectives(self) -> list[float]:
        return [e.F for e in self.trace if e.accepted]


def jacobian_fd(
    fun: Callable[[np.ndarray], np.ndarray],
    p,
    scales,
    fd_step: float = 1e-4,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    r0: Optional[np.ndarray] = None,
):
    """Central-difference Jacobian with step ``fd_step*max(|p_j|, scale_j)``.

    Where a central step would leave the feasible set (``project`` moves it),
    a one-sided difference is used instead. Returns ``(J, one_sided)``.
    """
    p = np.asarray(p, dtype=float)
    scales = np.asarray(scales, dtype=float)
    feasible = (lambda q: np.array_equal(project(q), q)) if project is not None else (lambda q: True)
    cols, flags = [], []
    for j in range(p.size):
        h = fd_step * max(abs(p[j]), scales[j])
        up, dn = p.copy(), p.copy()
        up[j] += h
        dn[j] -= h
        ok_up, ok_dn = feasible(up), feasible(dn)
        if ok_up and ok_dn:
            cols.append((fun(up) - fun(dn)) / (2.0 * h))
            flags.append(False)
            continue
        base = fun(p) if r0 is None else r0
        if ok_up:
            cols.append((fun(up) - base) / h)
        elif ok_dn:
            cols.append((base - fun(dn)) / h)
        else:
            cols.append(np.zeros_like(base))
        flags.append(True)
    return np.column_stack(cols), flags


def lm_solve(
    fun: Callable[[np.ndarray], np.ndarray],
    x0,
    bounds: Optional[BoundsBox] = None,
    config: LMConfig | None = None,
    scales=None,
    jac: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> StageResult:
    """Marquardt-scaled Levenberg-Marquardt on residuals ``fun(p)``.

    Each proposal solves ``(J^T J + lam*diag(J^T J)) d = -J^T r`` and is
    projected back onto the feasible set. An iteration is one Jacobian plus
    the damping search that follows it: rejected proposals grow ``lam`` and
    are retried, the first decrease is accepted and shrinks ``lam``.
    ``params`` of the result is the raw array.
    """
    config = config or LMConfig()
    if project is None:
        project = bounds.project if bounds is not None else (lambda q: np.asarray(q, dtype=float))
    p = np.asarray(x0, dtype=float).copy()
    if not np.allclose(project(p), p, rtol=0, atol=1e-12):
        raise ValueError(f"initial point {p} is outside the feasible set")
    scales = np.ones_like(p) if scales is None else np.asarray(scales, dtype=float)
    lam = config.lambda0
    r = fun(p)
    F = float(np.linalg.norm(r))
    trace: list[TraceEntry] = []

    def jacobian(q, rq):
        if jac is not None:
            return jac(q), [False] * q.size
        return jacobian_fd(fun, q, scales, config.fd_step, project, rq)

    def result(converged, message):
        return StageResult(p.copy(), F, len(trace), trace, converged, message)

    if F == 0.0:
        return result(True, "zero residual")
    J, one_sided = jacobian(p, r)
    while len(trace) < config.max_iter:
        g = J.T @ r
        colnorm = np.linalg.norm(J, axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            cosines = np.where(colnorm > 0, np.abs(g) / (colnorm * F), 0.0)
        if np.max(cosines) <= config.gtol:
            return result(True, "gradient tolerance")
        A = J.T @ J
        d = np.diag(A).copy()
        d = np.maximum(d, 1e-12 * max(d.max(), np.finfo(float).tiny))
        # inner damping search: one iteration ends at the first decrease
        rejected = 0
        while True:
            try:
                step = np.linalg.solve(A + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is None or not np.all(np.isfinite(step)):
                lam *= config.lambda_up
                if lam > config.lambda_max:
                    raise SingularSystemError(f"normal equations singular at damping {lam:.3g}; J^T J diag = {d}")
                continue
            cand = project(p + step)
            moved = cand - p
            r_new = fun(cand)
            F_new = float(np.linalg.norm(r_new))
            rel_step = np.max(np.abs(moved) / (np.abs(p) + scales))
            if F_new < F:
                break
            if rel_step <= config.xtol or lam * config.lambda_up > config.lambda_max:
                trace.append(TraceEntry(F_new, lam, False, tuple(p), tuple(one_sided), rejected))
                if rel_step <= config.xtol:
                    return result(True, "step tolerance")
                return result(False, "damping exceeded its cap without progress")
            rejected += 1
            lam *= config.lambda_up
        dF = (F - F_new) / F
        p, r, F = cand, r_new, F_new
        trace.append(TraceEntry(F_new, lam, True, tuple(p), tuple(one_sided), rejected))
        lam = max(lam * config.lambda_down, 1e-15)
        if F == 0.0:
            return result(True, "zero residual")
        if dF <= config.ftol:
            return result(True, "objective tolerance")
        if rel_step <= config.xtol:
            return result(True, "step tolerance")
        J, one_sided = jacobian(p, r)
    return result(False, "maximum iterations reached")


@dataclass(frozen=True)
class Region:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def contains(self, x: float, y: float) -> bool:
        return self.x_min < x < self.x_max and self.y_min < y < self.y_max

    def covers(self, other: "Region") -> bool:
        return (
            self.x_min <= other.x_min
            and self.x_max >= other.x_max
            and self.y_min <= other.y_min
            and self.y_max >= other.y_max
        )


def _cubic_cuboid(p: np.ndarray) -> Cuboid:
    h = 0.5 * p[3]
    return Cuboid(p[0] - h, p[0] + h, p[1] - h, p[1] + h, p[2] - h, p[2] + h, p[4])


def _cuboid_cuboid(p: np.ndarray) -> Cuboid:
    return Cuboid(*p)


def _window_operator(data: MeasurementSet, quad: QuadConfig | None):
    times, values = data.windowed()
    return CuboidOperator(data.pairs, times, data.medium, data.irf, quad), values


def residuals(params, data: MeasurementSet, model: Optional[CuboidOperator] = None, quad: QuadConfig | None = None):
    """Model minus measurement on the fitting windows, pair-major then time.

    ``params`` is a :class:`CubicParams`, :class:`CuboidParams` or
    :class:`~cuboid_fdot.forward.Cuboid`.
    """
    if model is None:
        model, values = _window_operator(data, quad)
    else:
        values = data.windowed()[1]
    cuboid = params if isinstance(params, Cuboid) else params.to_cuboid()
    try:
        pred = model(cuboid)
    except Exception as exc:  # add context, keep the original type visible
        raise RuntimeError(f"forward model failed for {cuboid}: {exc}") from exc
    return (pred - values).ravel()


_SCALES = {"cubic": np.array([1.0, 1.0, 1.0, 1.0, 0.01]), "cuboid": np.array([1.0] * 6 + [0.01])}


def _fit(kind: str, p0: np.ndarray, data: MeasurementSet, bounds: BoundsBox, config: LMConfig, quad):
    op, values = _window_operator(data, quad)
    flat = values.ravel()
    to_cuboid = _cubic_cuboid if kind == "cubic" else _cuboid_cuboid
    fun = lambda q: op(to_cuboid(q)).ravel() - flat  # noqa: E731
    res = lm_solve(fun, bounds.project(p0), bounds, config, scales=_SCALES[kind])
    res.params = _KIND_PARAMS[kind](*map(float, res.params))
    return res


def stage1_topography(
    data: MeasurementSet, threshold_ratio: float = 0.1, margin: float = 5.0, T: float | None = None
) -> Region:
    """Bounding box of bright pairs' midpoints, expanded by ``margin`` mm."""
    I = topography_integrals(data, T)  # noqa: E741
    if I.size == 0 or not np.max(I) > 0:
        raise NoTargetError("no pair carries a positive time-integrated signal")
    bright = np.flatnonzero(I >= threshold_ratio * np.max(I))
    mids = np.array([data.pairs[i].midpoint for i in bright])
    return Region(
        mids[:, 0].min() - margin, mids[:, 0].max() + margin, mids[:, 1].min() - margin, mids[:, 1].max() + margin
    )


def stage2_cubic(
    gamma: Region,
    data: MeasurementSet,
    bounds: BoundsBox | None = None,
    config: LMConfig | None = None,
    init: CubicParams | None = None,
    quad: QuadConfig | None = None,
    z0: float = 5.0,
    l: float = 4.0,  # noqa: E741
    M: float = 0.1,
) -> StageResult:
    """Fit (x0, y0, z0, l, M) of a cube; default start is the center of ``gamma``."""
    bounds = bounds or BoundsBox.paper_cubic()
    if init is None:
        init = CubicParams(*gamma.center, z0, l, M)
    elif not gamma.contains(init.x0, init.y0):
        log.info("cubic start (%g, %g) lies outside the topography region", init.x0, init.y0)
    return _fit("cubic", init.as_array(), data, bounds, config or LMConfig(), quad)


def stage3_cuboid(
    seed: CubicParams,
    data: MeasurementSet,
    bounds: BoundsBox | None = None,
    config: LMConfig | None = None,
    quad: QuadConfig | None = None,
) -> StageResult:
    """Fit the 7 cuboid parameters starting from the cube ``seed``."""
    if not isinstance(seed, CubicParams):
        raise TypeError("the cuboid stage starts from a fitted CubicParams")
    bounds = bounds or BoundsBox.paper_cuboid()
    p0 = CuboidParams.from_cubic(seed).as_array()
    return _fit("cuboid", p0, data, bounds, config or LMConfig(), quad)


@dataclass
class PipelineConfig:
    threshold_ratio: float = 0.1
    margin: float = 5.0
    cubic_init: Optional[CubicParams] = None
    init_z0: float = 5.0
    init_l: float = 4.0
    init_M: float = 0.1
    cubic_bounds: BoundsBox = field(default_factory=BoundsBox.paper_cubic)
    cuboid_bounds: BoundsBox = field(default_factory=BoundsBox.paper_cuboid)
    lm: LMConfig = field(default_factory=LMConfig)
    quad: QuadConfig = field(default_factory=QuadConfig)
    n_t: int = 20
    peak_offset: int = 9


@dataclass
class ReconstructionResult:
    gamma: Optional[Region] = None
    cubic: Optional[StageResult] = None
    cuboid: Optional[StageResult] = None

    @property
    def final(self) -> Optional[Cuboid]:
        return self.cuboid.params.to_cuboid() if self.cuboid is not None else None


def reconstruct(data: MeasurementSet, config: PipelineConfig | None = None) -> ReconstructionResult:
    """Topography, then cube fit inside it, then cuboid fit seeded by the cube."""
    config = config or PipelineConfig()
    out = ReconstructionResult()
    raw = data
    windowed: list[MeasurementSet] = []

    def fit_data() -> MeasurementSet:
        # windows come after topography so that an empty set fails in stage 1
        if not windowed:
            windowed.append(raw if raw.windows is not None else raw.with_windows(config.n_t, config.peak_offset))
        return windowed[0]

    stages = (
        ("topography", lambda: stage1_topography(raw, config.threshold_ratio, config.margin)),
        (
            "cubic",
            lambda: stage2_cubic(
                out.gamma, fit_data(), config.cubic_bounds, config.lm, config.cubic_init, config.quad,
                config.init_z0, config.init_l, config.init_M,
            ),
        ),
        ("cuboid", lambda: stage3_cuboid(out.cubic.params, fit_data(), config.cuboid_bounds, config.lm, config.quad)),
    )
    for name, run in stages:
        try:
            value = run()
        except Exception as exc:
            raise StageFailure(f"{name} stage failed: {exc}", out) from exc
        setattr(out, {"topography": "gamma"}.get(name, name), value)
        log.info("%s stage: %s", name, value if name == "topography" else value.params)
    return out

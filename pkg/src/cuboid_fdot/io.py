"""Configuration, measurement files, result records and plot data.

Run configurations are TOML files (see README for the full key list).
Measurement files are line-oriented text::

    # cuboid_fdot measurements v1
    # medium <mu_s_prime> <mu_a> <n_rel>
    # dt <ps>
    # irf delta <tau>            or   # irf sampled <dt> <tau> <w0> <w1> ...
    # scale <factor>
    # pair <i> <x_s> <y_s> <x_d> <y_d>
    # window <i> <t0> <dt> <n_t> <k0>      (optional, one per pair)
    <pair_index> <time_ps> <value>

All floats are written with 17 significant digits so a write/read cycle is
bit-exact.
"""

from __future__ import annotations

import csv
import json
import re
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .forward import Cuboid, MeasurementSet, SourceDetectorPair, TimeWindow, VoxelField
from .inversion import BoundsBox, CubicParams, LMConfig, PipelineConfig, ReconstructionResult, StageResult
from .kernel import InstrumentResponse, derive_medium
from .phantom import EllipsoidTarget, NoiseSpec, layout_beef16, layout_paper32

__all__ = [
    "ConfigError",
    "MeasurementFormatError",
    "MeasurementWarning",
    "ResultRecord",
    "RunConfig",
    "config_to_dict",
    "dump_config",
    "emit_cross_sections",
    "load_config",
    "read_irf",
    "read_measurements",
    "read_voxels",
    "write_measurements",
    "write_voxels",
]

FMT = "%.17g"


class ConfigError(ValueError):
    """Invalid run configuration; the message names the key path and line."""


class MeasurementFormatError(ValueError):
    """Malformed or empty measurement file."""


class MeasurementWarning(UserWarning):
    """Suspicious but retained measurement content (e.g. negative counts)."""


def _g(x: float) -> str:
    return FMT % x


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class MediumSpec:
    mu_s_prime: float = 0.92
    mu_a: float = 0.023
    n_rel: float = 1.37


@dataclass(frozen=True)
class IrfSpec:
    kind: str = "delta"  # "delta" or "file"
    path: str = ""
    tau: float = 0.0


@dataclass(frozen=True)
class LayoutSpec:
    kind: str = "paper32"  # "paper32", "beef16" or "explicit"
    pairs: tuple[tuple[float, float, float, float], ...] = ()  # (x_s, y_s, x_d, y_d)


@dataclass(frozen=True)
class TargetSpec:
    kind: str = "ellipsoid"  # "ellipsoid", "cuboid" or "voxel"
    center: tuple[float, float, float] = (0.0, 0.0, 11.0)
    semiaxes: tuple[float, float, float] = (1.5, 3.0, 1.5)
    n_value: float = 0.02
    bounds: tuple[float, ...] = ()  # x1 x2 y1 y2 z1 z2 for a cuboid
    M: float = 0.0
    path: str = ""
    spacing: float = 0.1


@dataclass(frozen=True)
class TimeSpec:
    dt: float = 6.67
    n_bins: int = 200
    n_t: int = 20
    peak_offset: int = 9


@dataclass(frozen=True)
class BoundsSpec:
    lateral: float = 30.0
    cubic_z_max: float = 30.0
    l_max: float = 20.0
    cuboid_z_max: float = 40.0
    M_max: float = 10.0


@dataclass(frozen=True)
class ReconSpec:
    threshold_ratio: float = 0.1
    margin: float = 5.0
    init: tuple[float, ...] = ()  # optional (x0, y0, z0, l, M)
    init_z0: float = 5.0
    init_l: float = 4.0
    init_M: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    medium: MediumSpec = MediumSpec()
    irf: IrfSpec = IrfSpec()
    layout: LayoutSpec = LayoutSpec()
    target: TargetSpec = TargetSpec()
    time: TimeSpec = TimeSpec()
    noise: NoiseSpec = NoiseSpec()
    bounds: BoundsSpec = BoundsSpec()
    lm: LMConfig = LMConfig()
    reconstruction: ReconSpec = ReconSpec()
    output: str = "out"
    base_dir: str = field(default=".", compare=False)

    # builders used by the CLI

    def build_medium(self):
        m = self.medium
        return derive_medium(m.mu_s_prime, m.mu_a, m.n_rel)

    def build_irf(self) -> InstrumentResponse:
        if self.irf.kind == "delta":
            return InstrumentResponse(tau=self.irf.tau)
        return read_irf(self.resolve(self.irf.path), tau=self.irf.tau)

    def build_pairs(self) -> list[SourceDetectorPair]:
        if self.layout.kind == "paper32":
            return layout_paper32()
        if self.layout.kind == "beef16":
            return layout_beef16()
        return [SourceDetectorPair((p[0], p[1]), (p[2], p[3]), i + 1) for i, p in enumerate(self.layout.pairs)]

    def build_target(self):
        t = self.target
        if t.kind == "ellipsoid":
            return EllipsoidTarget(t.center, t.semiaxes, t.n_value)
        if t.kind == "cuboid":
            return Cuboid(*t.bounds, M=t.M)
        return read_voxels(self.resolve(t.path))

    def build_pipeline(self) -> PipelineConfig:
        b, r = self.bounds, self.reconstruction
        return PipelineConfig(
            threshold_ratio=r.threshold_ratio,
            margin=r.margin,
            cubic_init=CubicParams(*r.init) if r.init else None,
            init_z0=r.init_z0,
            init_l=r.init_l,
            init_M=r.init_M,
            cubic_bounds=BoundsBox.paper_cubic(b.lateral, b.cubic_z_max, b.l_max, b.M_max),
            cuboid_bounds=BoundsBox.paper_cuboid(b.lateral, b.cuboid_z_max, b.M_max),
            lm=self.lm,
            n_t=self.time.n_t,
            peak_offset=self.time.peak_offset,
        )

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


_SECTIONS = {
    "medium": MediumSpec,
    "irf": IrfSpec,
    "layout": LayoutSpec,
    "target": TargetSpec,
    "time": TimeSpec,
    "noise": NoiseSpec,
    "bounds": BoundsSpec,
    "lm": LMConfig,
    "reconstruction": ReconSpec,
}
_CHOICES = {
    ("irf", "kind"): ("delta", "file"),
    ("layout", "kind"): ("paper32", "beef16", "explicit"),
    ("target", "kind"): ("ellipsoid", "cuboid", "voxel"),
}
_INT_KEYS = {("time", "n_bins"), ("time", "n_t"), ("time", "peak_offset"), ("noise", "seed"), ("lm", "max_iter")}


def _key_lines(text: str) -> dict[str, int]:
    """Map dotted key paths to 1-based line numbers (best effort for error messages)."""
    lines: dict[str, int] = {}
    section = ""
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.\-]+)\s*\]", line)
        if m:
            section = m.group(1)
            lines.setdefault(section, no)
            continue
        m = re.match(r"^([A-Za-z0-9_\-]+)\s*=", line)
        if m:
            lines.setdefault(f"{section}.{m.group(1)}" if section else m.group(1), no)
    return lines


class _Reporter:
    def __init__(self, path, lines):
        self.path, self.lines, self.errors = path, lines, []

    def add(self, key: str, msg: str):
        line = self.lines.get(key)
        where = f"line {line}" if line else "no line"
        self.errors.append(f"{self.path}: {key} ({where}): {msg}")


def _coerce(value, default, key, rep: _Reporter, want_int: bool):
    if isinstance(default, tuple):
        if not isinstance(value, list):
            rep.add(key, f"expected an array, got {type(value).__name__}")
            return default
        try:
            return tuple(tuple(float(x) for x in v) if isinstance(v, list) else float(v) for v in value)
        except (TypeError, ValueError):
            rep.add(key, "array entries must be numbers")
            return default
    if isinstance(default, str):
        if not isinstance(value, str):
            rep.add(key, f"expected a string, got {type(value).__name__}")
            return default
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        rep.add(key, f"expected a number, got {type(value).__name__}")
        return default
    if want_int:
        if not isinstance(value, int):
            rep.add(key, f"expected an integer, got {value!r}")
            return default
        return value
    return float(value)


def config_from_dict(data: dict, source: str = "<dict>", lines: Optional[dict] = None, base_dir: str = ".") -> RunConfig:
    rep = _Reporter(source, lines or {})
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key == "output":
            kwargs["output"] = _coerce(value, "", key, rep, False)
            continue
        if key not in _SECTIONS:
            rep.add(key, "unknown key")
            continue
        if not isinstance(value, dict):
            rep.add(key, "expected a table")
            continue
        cls = _SECTIONS[key]
        defaults = cls()
        known = {f.name for f in fields(cls)}
        sub = {}
        for k, v in value.items():
            path = f"{key}.{k}"
            if k not in known:
                rep.add(path, "unknown key")
                continue
            sub[k] = _coerce(v, getattr(defaults, k), path, rep, (key, k) in _INT_KEYS)
            if (key, k) in _CHOICES and sub[k] not in _CHOICES[(key, k)]:
                rep.add(path, f"must be one of {', '.join(_CHOICES[(key, k)])}, got {sub[k]!r}")
        try:
            kwargs[key] = cls(**sub)
        except (TypeError, ValueError) as exc:
            rep.add(key, str(exc))
    if rep.errors:
        raise ConfigError("\n".join(rep.errors))
    cfg = RunConfig(**kwargs, base_dir=base_dir)
    _validate(cfg, rep)
    if rep.errors:
        raise ConfigError("\n".join(rep.errors))
    return cfg


def _validate(cfg: RunConfig, rep: _Reporter):
    m, t = cfg.medium, cfg.time
    if not (m.mu_s_prime > 0 and m.mu_a >= 0 and m.n_rel > 0):
        rep.add("medium", "need mu_s_prime > 0, mu_a >= 0, n_rel > 0")
    if not t.dt > 0:
        rep.add("time.dt", f"must be positive, got {t.dt}")
    if t.n_t > t.n_bins:
        rep.add("time.n_t", f"n_t = {t.n_t} exceeds n_bins = {t.n_bins}")
    if not 0 <= t.peak_offset < t.n_t:
        rep.add("time.peak_offset", f"must lie in [0, n_t), got {t.peak_offset}")
    if cfg.irf.tau < 0:
        rep.add("irf.tau", "must be nonnegative")
    if cfg.irf.kind == "file" and not cfg.resolve(cfg.irf.path).is_file():
        rep.add("irf.path", f"file not found: {cfg.irf.path!r}")
    if cfg.layout.kind == "explicit":
        if not cfg.layout.pairs or any(len(p) != 4 for p in cfg.layout.pairs):
            rep.add("layout.pairs", "explicit layout needs rows [x_s, y_s, x_d, y_d]")
    tg = cfg.target
    if tg.kind == "voxel" and not cfg.resolve(tg.path).is_file():
        rep.add("target.path", f"file not found: {tg.path!r}")
    if tg.kind == "cuboid" and len(tg.bounds) != 6:
        rep.add("target.bounds", "cuboid target needs [x1, x2, y1, y2, z1, z2]")
    if tg.kind == "ellipsoid" and (len(tg.center) != 3 or len(tg.semiaxes) != 3):
        rep.add("target", "ellipsoid needs 3-element center and semiaxes")
    if not tg.spacing > 0:
        rep.add("target.spacing", "must be positive")
    if cfg.reconstruction.init and len(cfg.reconstruction.init) != 5:
        rep.add("reconstruction.init", "needs [x0, y0, z0, l, M]")
    if not 0 < cfg.reconstruction.threshold_ratio <= 1:
        rep.add("reconstruction.threshold_ratio", "must lie in (0, 1]")


def load_config(path) -> RunConfig:
    """Parse and validate a TOML run configuration."""
    path = Path(path)
    text = path.read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # the decoder gives line and column; add the key written on that line
        msg = f"{path}: {exc}"
        m = re.search(r"at line (\d+)", str(exc))
        if m:
            lines = text.splitlines()
            no = int(m.group(1))
            key = re.match(r"\s*([A-Za-z0-9_.\-]+)\s*=", lines[no - 1]) if 0 < no <= len(lines) else None
            if key:
                msg += f" [key {key.group(1)!r}]"
        raise ConfigError(msg) from exc
    return config_from_dict(data, str(path), _key_lines(text), str(path.parent))


def config_to_dict(cfg: RunConfig) -> dict:
    out: dict[str, Any] = {}
    for name in _SECTIONS:
        sec = asdict(getattr(cfg, name))
        out[name] = {k: (_listify(v)) for k, v in sec.items()}
    out["output"] = cfg.output
    return out


def _listify(v):
    if isinstance(v, tuple):
        return [_listify(x) for x in v]
    return v


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


# ---------------------------------------------------------------- measurements


def write_measurements(meas: MeasurementSet, path) -> None:
    m = meas.medium
    out = ["# cuboid_fdot measurements v1", f"# medium {_g(m.mu_s_prime)} {_g(m.mu_a)} {_g(m.n_rel)}"]
    if meas.times.size >= 2:
        out.append(f"# dt {_g(meas.dt)}")
    irf = meas.irf
    if irf.is_delta:
        out.append(f"# irf delta {_g(irf.tau)}")
    else:
        out.append(f"# irf sampled {_g(irf.dt)} {_g(irf.tau)} " + " ".join(map(_g, irf.samples)))
    out.append(f"# scale {_g(meas.scale)}")
    for p in meas.pairs:
        out.append(f"# pair {p.index} {_g(p.rho_s[0])} {_g(p.rho_s[1])} {_g(p.rho_d[0])} {_g(p.rho_d[1])}")
    for p, w in zip(meas.pairs, meas.windows or []):
        out.append(f"# window {p.index} {_g(w.t0)} {_g(w.dt)} {w.n_t} {w.k0}")
    for p, row in zip(meas.pairs, meas.values):
        out.extend(f"{p.index} {_g(t)} {_g(v)}" for t, v in zip(meas.times, row))
    Path(path).write_text("\n".join(out) + "\n")


def read_measurements(path) -> MeasurementSet:
    """Parse a measurement file; negative values are kept with a warning."""
    path = Path(path)
    medium = None
    irf = InstrumentResponse()
    scale = 1.0
    pairs: dict[int, SourceDetectorPair] = {}
    windows: dict[int, TimeWindow] = {}
    data: dict[int, list[tuple[float, float]]] = {}
    negatives = 0

    def bad(no, msg):
        return MeasurementFormatError(f"{path}:{no}: {msg}")

    for no, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        try:
            if line.startswith("#"):
                tok = line[1:].split()
                if not tok:
                    continue
                key, args = tok[0], tok[1:]
                if key == "medium":
                    medium = derive_medium(*(float(a) for a in _n(args, 3)))
                elif key == "irf":
                    if args[0] == "delta":
                        irf = InstrumentResponse(tau=float(_n(args[1:], 1)[0]))
                    elif args[0] == "sampled":
                        irf = InstrumentResponse("sampled", np.array(args[3:], dtype=float), float(args[1]),
                                                 float(args[2]))
                    else:
                        raise bad(no, f"unknown irf kind {args[0]!r}")
                elif key == "scale":
                    scale = float(_n(args, 1)[0])
                elif key == "pair":
                    i, xs, ys, xd, yd = _n(args, 5)
                    if int(i) in pairs:
                        raise bad(no, f"pair {i} declared twice")
                    pairs[int(i)] = SourceDetectorPair((float(xs), float(ys)), (float(xd), float(yd)), int(i))
                elif key == "window":
                    i, t0, dt, n_t, k0 = _n(args, 5)
                    windows[int(i)] = TimeWindow(float(t0), float(dt), int(n_t), int(k0))
                # other comment lines (including "dt" and the banner) are informational
                continue
            tok = line.split()
            if len(tok) != 3:
                raise bad(no, f"expected 'pair_index time value', got {len(tok)} fields")
            i, t, v = int(tok[0]), float(tok[1]), float(tok[2])
        except MeasurementFormatError:
            raise
        except (ValueError, IndexError) as exc:
            raise bad(no, f"cannot parse {raw!r}: {exc}") from None
        if i not in pairs:
            raise bad(no, f"data for undeclared pair {i}")
        if not (np.isfinite(t) and np.isfinite(v)):
            raise bad(no, "non-finite value")
        negatives += v < 0
        data.setdefault(i, []).append((t, v))
    if not pairs or not data:
        raise MeasurementFormatError(f"{path}: no measurements found")
    if medium is None:
        raise MeasurementFormatError(f"{path}: missing '# medium' header")
    order = sorted(pairs)
    missing = [i for i in order if i not in data]
    if missing:
        raise MeasurementFormatError(f"{path}: pairs without data: {missing}")
    times = np.array([t for t, _ in data[order[0]]])
    for i in order:
        if not np.array_equal(np.array([t for t, _ in data[i]]), times):
            raise MeasurementFormatError(f"{path}: pair {i} uses a different time grid")
    if negatives:
        warnings.warn(f"{path}: {negatives} negative values retained", MeasurementWarning, stacklevel=2)
    values = np.array([[v for _, v in data[i]] for i in order])
    wins = [windows[i] for i in order] if windows else None
    if windows and len(windows) != len(order):
        raise MeasurementFormatError(f"{path}: windows given for only some pairs")
    return MeasurementSet([pairs[i] for i in order], times, values, medium, irf, wins, scale)


def _n(args, n):
    if len(args) != n:
        raise ValueError(f"expected {n} fields, got {len(args)}")
    return args


def read_irf(path, tau: float = 0.0) -> InstrumentResponse:
    """Two-column (time_ps, weight) file on a uniform grid starting at 0."""
    arr = np.loadtxt(path, comments="#", ndmin=2)
    if arr.shape[1] != 2 or arr.shape[0] < 2:
        raise ValueError(f"{path}: need at least two rows of (time, weight)")
    t, w = arr[:, 0], arr[:, 1]
    dt = t[1] - t[0]
    if not dt > 0 or not np.allclose(np.diff(t), dt, rtol=1e-9, atol=0) or abs(t[0]) > 1e-9 * dt:
        raise ValueError(f"{path}: times must form a uniform grid starting at 0")
    return InstrumentResponse("sampled", w, float(dt), tau)


def write_voxels(field: VoxelField, path) -> None:
    np.savez(path, origin=np.asarray(field.origin, float), spacing=np.atleast_1d(np.asarray(field.spacing, float)),
             n_values=field.n_values)


def read_voxels(path) -> VoxelField:
    with np.load(path) as z:
        sp = z["spacing"]
        return VoxelField(tuple(z["origin"]), float(sp[0]) if sp.size == 1 else tuple(sp), z["n_values"])


# ---------------------------------------------------------------- results


def _stage_dict(res: Optional[StageResult]):
    if res is None:
        return None
    p = res.params
    return {
        "kind": type(p).__name__,
        "params": {f.name: float(getattr(p, f.name)) for f in fields(p)},
        "objective": res.objective,
        "iterations": res.iterations,
        "converged": res.converged,
        "message": res.message,
        "trace": [{"F": e.F, "lam": e.lam, "accepted": e.accepted, "rejected": e.rejected} for e in res.trace],
    }


@dataclass
class ResultRecord:
    config: dict
    gamma: Optional[dict]
    stages: dict
    final: Optional[dict]
    seed: Optional[int]
    version: str
    timings: dict = field(default_factory=dict)

    @classmethod
    def from_result(cls, result: ReconstructionResult, config: dict, seed, version: str, timings=None):
        g = result.gamma
        final = None
        if result.final is not None:
            c = result.final
            final = {k: float(getattr(c, k)) for k in ("x1", "x2", "y1", "y2", "z1", "z2", "M")}
            final["converged"] = bool(result.cuboid.converged)
        return cls(
            config=config,
            gamma=None if g is None else {k: float(getattr(g, k)) for k in ("x_min", "x_max", "y_min", "y_max")},
            stages={"cubic": _stage_dict(result.cubic), "cuboid": _stage_dict(result.cuboid)},
            final=final,
            seed=seed,
            version=version,
            timings=dict(timings or {}),
        )

    def to_json(self) -> str:
        body = {k: v for k, v in asdict(self).items() if k != "timings"}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def write(self, directory) -> Path:
        """result.json (deterministic) plus timings.json (wall clock)."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "result.json").write_text(self.to_json())
        (d / "timings.json").write_text(json.dumps(self.timings, indent=2, sort_keys=True) + "\n")
        return d / "result.json"

    @classmethod
    def read(cls, path) -> "ResultRecord":
        body = json.loads(Path(path).read_text())
        return cls(**body)


def _rect(a1, a2, b1, b2):
    return [(a1, b1), (a2, b1), (a2, b2), (a1, b2), (a1, b1)]


def _ellipse(c1, c2, s1, s2, n=256):
    th = 2 * np.pi * np.arange(n) / n
    return list(zip(c1 + s1 * np.cos(th), c2 + s2 * np.sin(th)))


def emit_cross_sections(record: ResultRecord, directory, truth: Optional[EllipsoidTarget] = None) -> list[Path]:
    """Write z-plane, x-z and y-z outline CSVs for re-plotting.

    The cuboid outline is a closed 5-point polyline; the optional truth is
    the ellipsoid's central section sampled at 256 points.
    """
    f = record.final
    if f is None:
        raise ValueError("result has no final cuboid")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    zmid = 0.5 * (f["z1"] + f["z2"])
    ymid = 0.5 * (f["y1"] + f["y2"])
    xmid = 0.5 * (f["x1"] + f["x2"])
    planes = [
        ("cross_section_z.csv", f"z={_g(zmid)}", ("x", "y"), _rect(f["x1"], f["x2"], f["y1"], f["y2"]), (0, 1)),
        ("cross_section_xz.csv", f"y={_g(ymid)}", ("x", "z"), _rect(f["x1"], f["x2"], f["z1"], f["z2"]), (0, 2)),
        ("cross_section_yz.csv", f"x={_g(xmid)}", ("y", "z"), _rect(f["y1"], f["y2"], f["z1"], f["z2"]), (1, 2)),
    ]
    written = []
    for name, where, (u, v), rect, (i, j) in planes:
        cols = [f"cuboid_{u}", f"cuboid_{v}"]
        curves = [rect]
        if truth is not None:
            cols += [f"truth_{u}", f"truth_{v}"]
            curves.append(_ellipse(truth.center[i], truth.center[j], truth.semiaxes[i], truth.semiaxes[j]))
        n = max(len(c) for c in curves)
        with open(d / name, "w", newline="") as fh:
            fh.write(f"# plane {where} converged={'true' if f.get('converged') else 'false'}\n")
            w = csv.writer(fh)
            w.writerow(cols)
            for k in range(n):
                row = []
                for c in curves:
                    row += [_g(c[k][0]), _g(c[k][1])] if k < len(c) else ["", ""]
                w.writerow(row)
        written.append(d / name)
    return written

"""Command-line entry point: ``cuboid-fdot <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .forward import (
    oracle_relative_error,
    random_interior_cuboids,
    simulate_timeseries,
    topography_integrals,
    window_sample_times,
)
from .inversion import StageFailure, reconstruct, stage1_topography
from .io import (
    ConfigError,
    MeasurementFormatError,
    ResultRecord,
    RunConfig,
    config_to_dict,
    emit_cross_sections,
    load_config,
    read_measurements,
    write_measurements,
)
from .phantom import EllipsoidTarget, add_noise, voxelize_ellipsoid

log = logging.getLogger("cuboid_fdot")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
ORACLE_RTOL = 1e-3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int, help="noise seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker count (results do not depend on it)")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--verbose", action="store_true")

    p = _Parser(prog="cuboid-fdot", description="Cuboid reconstruction for time-domain fluorescence tomography.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="write clean and noisy measurement files")
    r = sub.add_parser("reconstruct", parents=[common], help="run the three-stage reconstruction")
    r.add_argument("data", type=Path, help="measurement file")
    t = sub.add_parser("topography", parents=[common], help="time-integrated signals and the region they select")
    t.add_argument("data", type=Path, help="measurement file")
    c = sub.add_parser("check-forward", parents=[common], help="factorized vs voxelized forward model")
    c.add_argument("--cases", type=int, default=10)
    c.add_argument("--spacing", type=float, default=0.1, help="voxel pitch in mm")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"--seed must be nonnegative, got {args.seed}")
        cfg = replace(cfg, noise=replace(cfg.noise, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, output=str(args.out))
    if args.threads < 1:
        raise ConfigError(f"--threads must be at least 1, got {args.threads}")
    return cfg


def _sim_target(cfg: RunConfig):
    target = cfg.build_target()
    if isinstance(target, EllipsoidTarget):
        return voxelize_ellipsoid(target, cfg.target.spacing)
    return target


def cmd_simulate(cfg: RunConfig) -> int:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    clean = simulate_timeseries(
        _sim_target(cfg), cfg.build_pairs(), cfg.time.dt, cfg.time.n_bins, cfg.build_medium(), cfg.build_irf()
    )
    noisy = add_noise(clean, cfg.noise)
    write_measurements(clean, out / "clean.txt")
    write_measurements(noisy, out / "noisy.txt")
    print(f"wrote {out / 'clean.txt'} and {out / 'noisy.txt'} ({len(clean.pairs)} pairs x {clean.times.size} bins)")
    return EXIT_OK


def cmd_reconstruct(cfg: RunConfig, data_path: Path) -> int:
    data = read_measurements(data_path)
    started = time.perf_counter()
    status = EXIT_OK
    try:
        result = reconstruct(data, cfg.build_pipeline())
    except StageFailure as exc:
        log.error("%s", exc)
        result, status = exc.partial, EXIT_NUMERIC
    elapsed = time.perf_counter() - started
    record = ResultRecord.from_result(
        result, config_to_dict(cfg), cfg.noise.seed, __version__, {"reconstruct_s": elapsed}
    )
    out = Path(cfg.output)
    path = record.write(out)
    if record.final is not None:
        truth = cfg.build_target() if cfg.target.kind == "ellipsoid" else None
        emit_cross_sections(record, out, truth)
        f = record.final
        print(
            f"cuboid x [{f['x1']:.4f}, {f['x2']:.4f}]  y [{f['y1']:.4f}, {f['y2']:.4f}]  "
            f"z [{f['z1']:.4f}, {f['z2']:.4f}]  M {f['M']:.5g}  converged={f['converged']}"
        )
    print(f"wrote {path}")
    return status


def cmd_topography(cfg: RunConfig, data_path: Path) -> int:
    data = read_measurements(data_path)
    I = topography_integrals(data)  # noqa: E741
    print("pair  x_mid       y_mid       I")
    for p, v in zip(data.pairs, I):
        print(f"{p.index:4d}  {p.midpoint[0]:10.4f}  {p.midpoint[1]:10.4f}  {v:.6e}")
    g = stage1_topography(data, cfg.reconstruction.threshold_ratio, cfg.reconstruction.margin)
    print(f"Gamma: x in [{g.x_min:.4f}, {g.x_max:.4f}], y in [{g.y_min:.4f}, {g.y_max:.4f}]")
    return EXIT_OK


def cmd_check_forward(cfg: RunConfig, cases: int, spacing: float) -> int:
    if cases < 1 or not spacing > 0:
        raise ConfigError("--cases must be >= 1 and --spacing > 0")
    medium = cfg.build_medium()
    pairs = cfg.build_pairs()
    rng = np.random.default_rng(cfg.noise.seed)
    worst = 0.0
    for k, c in enumerate(random_interior_cuboids(rng, cases), 1):
        err = oracle_relative_error(c, pairs, window_sample_times(c, pairs, medium), medium, spacing)
        worst = max(worst, err)
        print(f"case {k:3d}  center ({c.center[0]:7.3f}, {c.center[1]:7.3f}, {c.center[2]:7.3f})  rel err {err:.3e}")
    print(f"max relative error {worst:.3e} (tolerance {ORACLE_RTOL:g})")
    return EXIT_OK if worst < ORACLE_RTOL else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, args.data)
        if args.command == "topography":
            return cmd_topography(cfg, args.data)
        return cmd_check_forward(cfg, args.cases, args.spacing)
    except (ConfigError, MeasurementFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ArithmeticError, np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

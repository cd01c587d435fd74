"""``ewlab`` command line: simulate, decompose, geodesics, fluxes, check, convergence.

The JSON config is the source of truth for runs; flags only select files and
commands.  Exit codes: 0 pass, 1 tolerance failure, 2 usage or config
error, 3 runtime instability.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import DEFAULTS, ConfigError, canonical_json, load_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_UNSTABLE = 0, 1, 2, 3
SUITE_NAMES = ("piola", "decoupling", "linear-waves", "raychaudhuri", "coercive", "lp", "determinism", "convergence", "all")

log = logging.getLogger("ewlab")


class UsageError(Exception):
    pass


def _parse_tip(text: str) -> tuple[float, float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"tip must be t,x,y,z, got {text!r}") from None
    if len(vals) != 4:
        raise UsageError(f"tip must have four comma-separated numbers, got {text!r}")
    return vals  # type: ignore[return-value]


def _load_traj(path: str):
    from .evolve import Trajectory

    d = Path(path)
    if not (d / "run.json").exists():
        raise UsageError(f"{d} is not a trajectory directory")
    return Trajectory.load(d)


def cmd_simulate(args: argparse.Namespace) -> int:
    from .diagnostics import energy_records, records_csv
    from .evolve import simulate

    cfg = load_config(args.config)
    out = Path(args.out or cfg["output_dir"])
    traj = simulate(cfg)
    # write into a scratch directory first so a crash leaves no partial run behind
    out.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=out.parent) as tmp:
        stage = Path(tmp) / "run"
        traj.save(stage)
        (stage / "diagnostics.csv").write_text(records_csv(energy_records(traj)), encoding="utf-8")
        if out.exists():
            shutil.rmtree(out)
        stage.rename(out)
    print(f"wrote {out} ({len(traj.snapshots)} snapshots, dt {traj.dt:.6g})")
    if traj.failure:
        print(f"run stopped: {json.dumps(traj.failure, sort_keys=True)}", file=sys.stderr)
        return EXIT_UNSTABLE
    return EXIT_OK


def cmd_decompose(args: argparse.Namespace) -> int:
    from .evolve import simulate_decomposed
    from .ewf import write_field

    traj = _load_traj(args.traj)
    phis, psis, report = simulate_decomposed(traj.config, traj)
    out = Path(args.out or args.traj)
    out.mkdir(parents=True, exist_ok=True)
    for k, (t, phi, psi) in enumerate(zip(phis.times, phis.fields, psis.fields)):
        write_field(out / f"phi_{k:06d}.ewf", phi, float(t))
        write_field(out / f"psi_{k:06d}.ewf", psi, float(t))
    (out / "decomposition.json").write_text(canonical_json(report), encoding="utf-8")
    print(f"psi gap to the linear evolution: max {max(report['psi_gap']):.3e}")
    if "divpart_residual" in report:
        print(f"divergence-part residual: max {max(report['divpart_residual']):.3e}")
    return EXIT_OK


def _bundle(args: argparse.Namespace):
    from .acoustic_geometry import SplineMetric, trace_bundle

    traj = _load_traj(args.traj)
    metric = SplineMetric.from_trajectory(traj)
    tip = _parse_tip(args.tip)
    if not (metric.t_min <= tip[0] < metric.t_max):
        raise UsageError(f"tip time {tip[0]} outside the trajectory coverage [{metric.t_min}, {metric.t_max}]")
    bundle = trace_bundle(metric, tip, n_omega=args.nomega, dt_ray=args.dt_ray)
    return traj, metric, bundle


def cmd_geodesics(args: argparse.Namespace) -> int:
    from .acoustic_geometry import geodesics_csv, h_spacelike_check

    traj, metric, bundle = _bundle(args)
    out = Path(args.out or Path(args.traj) / "geodesics.csv")
    out.write_text(geodesics_csv(bundle, traj.spec), encoding="utf-8")
    hs = h_spacelike_check(bundle, traj.spec, metric)
    print(f"wrote {out}: {bundle.n_omega} rays, {len(bundle.times)} samples, H > 0 everywhere: {hs.ok}")
    if bundle.rays.truncated:
        print(f"rays stopped early ({bundle.rays.stop_reason})", file=sys.stderr)
    if np.any(bundle.flagged_rays):
        print(f"{int(bundle.flagged_rays.sum())} rays exceed the null-drift flag", file=sys.stderr)
    return EXIT_OK


def cmd_fluxes(args: argparse.Namespace) -> int:
    from .acoustic_geometry import ScalarField, fluxes_csv, null_fluxes

    traj, metric, bundle = _bundle(args)
    part, _, comp = args.field.partition(":")
    fld = ScalarField.from_trajectory(traj, part, int(comp or 0))
    rec = null_fluxes(bundle, metric, fld, traj.spec)
    out = Path(args.out or Path(args.traj) / "fluxes.csv")
    out.write_text(fluxes_csv([rec]), encoding="utf-8")
    print(f"wrote {out}: F1 {rec['F1']:.6g}, F2 {rec['F2']:.6g}, coercive ratio {rec['coercive_ratio']:.4g} "
          f"({rec['excluded_samples']} samples near the tip excluded)")
    return EXIT_OK


def _emit(rep, json_path: str | None) -> int:
    for line in rep.lines():
        print(line)
    print(f"{rep.suite}: {'PASS' if rep.passed else 'FAIL'} ({len(rep.checks)} checks, {rep.seconds:.1f} s)")
    if json_path:
        Path(json_path).write_text(rep.to_json(), encoding="utf-8")
    return rep.exit_status


def cmd_check(args: argparse.Namespace) -> int:
    from .suites import run_suite

    if args.suite not in SUITE_NAMES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITE_NAMES)}")
    return _emit(run_suite(args.suite), args.json)


def cmd_convergence(args: argparse.Namespace) -> int:
    import time

    from .suites import suite_convergence

    cfg = load_config(args.config) if args.config else None
    t0 = time.perf_counter()
    try:
        rep = suite_convergence(args.levels, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rep.seconds = time.perf_counter() - t0
    return _emit(rep, args.json)


def build_parser() -> argparse.ArgumentParser:
    defaults = json.dumps(DEFAULTS, indent=1, sort_keys=True)
    p = argparse.ArgumentParser(
        prog="ewlab",
        description="Admissible harmonic elastic waves: solver, diagnostics and acoustic null-cone geometry.",
        epilog=f"Config defaults:\n{defaults}\n\nEWLAB_THREADS caps FFT threads. Exit codes: 0 pass, 1 tolerance failure, "
        "2 usage/config error, 3 runtime instability.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--version", action="version", version=f"ewlab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a config and write a trajectory directory")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="trajectory directory (default: output_dir from the config)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("decompose", help="Helmholtz-split a trajectory and compare psi with the linear evolution")
    s.add_argument("--traj", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_decompose)

    for name, func, helptext in (
        ("geodesics", cmd_geodesics, "trace a null cone of the fast acoustic metric"),
        ("fluxes", cmd_fluxes, "null fluxes of a field through a traced cone"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--traj", required=True)
        s.add_argument("--tip", required=True, help="cone vertex t,x,y,z")
        s.add_argument("--nomega", type=int, default=642, help="ray count (snapped to an icosphere count)")
        s.add_argument("--dt-ray", type=float, default=0.01)
        s.add_argument("--out")
        if name == "fluxes":
            s.add_argument("--field", default="phi:0", help="part:component with part phi, psi or U")
        s.set_defaults(func=func)

    s = sub.add_parser("check", help="run an acceptance suite")
    s.add_argument("--suite", required=True, help=", ".join(SUITE_NAMES))
    s.add_argument("--json", help="also write the report as JSON")
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("convergence", help="observed orders under refinement")
    s.add_argument("--config", help="base config (grid and material of the solver study)")
    s.add_argument("--levels", type=int, default=2)
    s.add_argument("--json")
    s.set_defaults(func=cmd_convergence)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except (ConfigError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"unstable: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE


if __name__ == "__main__":
    sys.exit(main())

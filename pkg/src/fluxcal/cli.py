"""Command-line entry point: ``fluxcal calibrate | landscape | replay``.

Exit codes: 0 success, 1 runtime failure (artifacts are kept), 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibrator import DEFAULT_DELTA, SPAN_PERIODS, periodicity_optimizer_config
from .device import PRESETS, DeviceConfig
from .session import (
    InitialEstimate,
    deviation_summary,
    load_session,
    replay,
    run_landscape,
    run_periodicity,
    run_translation,
    unique_dir,
)

DEFAULT_OUT = "fluxcal-sessions"

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _grid(text: str) -> list[float]:
    """``lo:hi:count`` or a comma-separated list."""
    try:
        if ":" in text:
            lo, hi, count = text.split(":")
            return np.linspace(float(lo), float(hi), int(count)).tolist()
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}: {exc}") from exc


def _add_device(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", default=None, help=f"built-in device ({', '.join(PRESETS)}); default {PRESETS[0]}")
    src.add_argument("--device-config", type=Path, help="device JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help=f"output root (else $FLUXCAL_OUT, else ./{DEFAULT_OUT})")
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA, help="sweep step in flux quanta")
    p.add_argument("--span", type=float, default=SPAN_PERIODS, help="sweep length in periods")
    p.add_argument("--perturb", type=float, default=0.1,
                   help="relative off-diagonal error of the simulated starting estimate")
    p.add_argument("--init-from", type=Path, help="start from the final estimate of a stored session")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fluxcal", description="Flux-crosstalk calibration on simulated devices.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    cal = sub.add_parser("calibrate", help="run a calibration and write a session directory")
    _add_device(cal)
    cal.add_argument("--method", choices=("periodicity", "translation", "both"), default="periodicity")
    cal.add_argument("--algorithm", choices=("bayes", "spsa"), default="bayes")
    cal.add_argument("--budget", type=int, help="objective evaluations per loop")
    cal.add_argument("--n-init", type=int, help="random evaluations before the GP model is used")
    cal.add_argument("--bounds", type=float, help="box bound on each compensation parameter")
    cal.add_argument("--iterations", type=int, default=4, help="translation iterations (maximum)")
    cal.add_argument("--tol", type=float, default=3e-3, help="translation off-diagonal tolerance")

    land = sub.add_parser("landscape", help="score P on a grid of compensation values")
    _add_device(land)
    land.add_argument("--loop", type=int, default=0)
    land.add_argument("--params", type=int, nargs="+", required=True, help="one or two loops j of Omega[j, loop]")
    land.add_argument("--grid", type=_grid, action="append", required=True,
                      help="once per parameter: lo:hi:count or v1,v2,... (write --grid=-0.1:0.1:11)")
    land.add_argument("--center", choices=("zero", "optimum"), default="zero",
                      help="offset the grid from zero or from the exact optimum (simulation only)")

    rep = sub.add_parser("replay", help="recompute a session from its raw sweeps")
    rep.add_argument("session", type=Path)
    return parser


def load_device(args: argparse.Namespace) -> DeviceConfig:
    if args.device_config is not None:
        try:
            return DeviceConfig.from_json(args.device_config)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot load device config {args.device_config}: {exc}") from exc
    name = args.preset or PRESETS[0]
    try:
        return DeviceConfig.preset(name)
    except KeyError as exc:
        raise UsageError(f"unknown preset {name!r}; available presets: {', '.join(PRESETS)}") from exc


def output_root(args: argparse.Namespace) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get("FLUXCAL_OUT") or DEFAULT_OUT)


def _initial(args: argparse.Namespace, config: DeviceConfig) -> InitialEstimate:
    if args.init_from is not None:
        try:
            return InitialEstimate.from_session(args.init_from)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot start from {args.init_from}: {exc}") from exc
    return InitialEstimate.perturbed(config, args.seed, args.perturb)


def _matrix_lines(m: np.ndarray, indent: str = "  ") -> list[str]:
    return [indent + " ".join(f"{v:+.6f}" for v in row) for row in m]


def _print_deviation(dev: dict | None) -> None:
    if dev is None:
        return
    print(f"deviation |C_true inv(C_est) - I|: max {dev['max_abs']:.3e}, "
          f"max off-diagonal {dev['max_abs_offdiag']:.3e}")


def _opt_config(args: argparse.Namespace, n: int):
    over = {}
    if args.budget is not None:
        over["n_total"] = args.budget
    if args.n_init is not None:
        over["n_init"] = args.n_init
    if args.bounds is not None:
        over["bound"] = args.bounds
    try:
        return periodicity_optimizer_config(n, args.seed, args.algorithm, **over)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _calibrate_periodicity(args, config, root) -> dict:
    init = _initial(args, config)
    opt = _opt_config(args, config.n)
    path = unique_dir(root, f"periodicity-{config.name}-s{args.seed}")
    plan_kw = {"channels": config.sweep_channels, "delta": args.delta, "span_periods": args.span}
    session, path = run_periodicity(path, config, init, opt, plan_kw)
    print(f"periodicity session: {path}")
    for i, run in sorted(session.runs.items()):
        r = run.result
        if r is None:
            print(f"  loop {i}: incomplete ({run.error})")
            continue
        om = ", ".join(f"O[{j},{i}]={v:+.5f}" for j, v in r.params.items())
        print(f"  loop {i}: {om}  period {r.period:.5f}  P {r.score:.5f}  ({len(run.evaluations)} evaluations)")
    if session.C_estimate is None:
        raise RuntimeError("; ".join(session.errors) or "calibration incomplete")
    print("C estimate:")
    print("\n".join(_matrix_lines(session.C_estimate)))
    dev = deviation_summary(config.C, session.C_estimate)
    _print_deviation(dev)
    return {"method": "periodicity", "path": path, "deviation": dev,
            "measurements": load_session(path)["measurements"]}


def _calibrate_translation(args, config, root) -> dict:
    if args.iterations < 1:
        raise UsageError("--iterations must be at least 1")
    path = unique_dir(root, f"translation-{config.name}")
    res, path = run_translation(path, config, args.iterations, args.tol)
    print(f"translation session: {path}")
    for it in res.iterations:
        periods = ", ".join(f"{p:.5f}" for p in it.periods)
        print(f"  iteration {it.index}: max off-diagonal {it.max_offdiag:.3e}  periods [{periods}]"
              + (f"  low confidence {it.low_confidence}" if it.low_confidence else ""))
    if not res.converged:
        print(f"  not converged to {args.tol:g}")
    print("C_ref:")
    print("\n".join(_matrix_lines(res.C_ref)))
    dev = deviation_summary(config.C, res.C_ref)
    _print_deviation(dev)
    return {"method": "translation", "path": path, "deviation": dev,
            "measurements": load_session(path)["measurements"]}


def cmd_calibrate(args: argparse.Namespace) -> int:
    config = load_device(args)
    root = output_root(args)
    root.mkdir(parents=True, exist_ok=True)
    methods = ["periodicity", "translation"] if args.method == "both" else [args.method]
    rows = []
    for m in methods:
        rows.append((_calibrate_periodicity if m == "periodicity" else _calibrate_translation)(args, config, root))
    if len(rows) > 1:
        print("\ncomparison")
        print(f"  {'method':<12} {'max |E|':>10} {'max off-diag':>13} {'readouts':>10}")
        for r in rows:
            print(f"  {r['method']:<12} {r['deviation']['max_abs']:>10.3e} "
                  f"{r['deviation']['max_abs_offdiag']:>13.3e} {r['measurements']:>10}")
    return EXIT_OK


def cmd_landscape(args: argparse.Namespace) -> int:
    config = load_device(args)
    if len(args.grid) != len(args.params) or len(args.params) not in (1, 2):
        raise UsageError("give one --grid per --params entry (one or two parameters)")
    if not 0 <= args.loop < config.n or args.loop in args.params or not all(0 <= j < config.n for j in args.params):
        raise UsageError(f"invalid --loop {args.loop} / --params {args.params} for {config.n} loops")
    init = _initial(args, config)
    center = None
    if args.center == "optimum":
        from .coords import optimum_compensation, residual_of
        c_res, _ = residual_of(config.C, config.f0, init.C, init.f0)
        center = optimum_compensation(c_res, args.loop).params
    root = output_root(args)
    root.mkdir(parents=True, exist_ok=True)
    tag = "-".join(str(j) for j in args.params)
    path = unique_dir(root, f"landscape-{config.name}-loop{args.loop}-p{tag}")
    plan_kw = {"channels": config.sweep_channels, "delta": args.delta, "span_periods": args.span}
    scores, path = run_landscape(path, config, init, args.loop, args.params, args.grid, center, plan_kw)
    k = np.unravel_index(int(np.nanargmax(scores)), np.shape(scores))
    best = [args.grid[a][int(b)] for a, b in enumerate(k[-len(args.params):])]
    print(f"landscape session: {path}")
    print(f"  {np.size(scores)} points; max P {np.nanmax(scores):.5f} at grid offset {best}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    report = replay(args.session)
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_FAIL


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"calibrate": cmd_calibrate, "landscape": cmd_landscape, "replay": cmd_replay}[args.command]
    try:
        return handler(args)
    except UsageError as exc:
        print(f"fluxcal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"fluxcal: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

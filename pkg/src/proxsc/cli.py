"""Command-line front end: ``simulate``, ``estimate`` and ``montecarlo``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every run prints its fully resolved configuration before any result.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

from .dgp import DgpConfig, simulate_with_latents, true_parameters
from .errors import BadConfig, DataError, NumericalError, ProxscError
from .estimate import estimate
from .gmm import CovSpec
from .moments import InstrumentChoice
from .montecarlo import METRICS, McConfig, emit_table, run_mc
from .panel import EstimatorKind, load_panel, save_panel

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; we reserve 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, default=_jsonable)


def _jsonable(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _print_config(name: str, cfg: dict) -> None:
    print(f"# {name} configuration")
    print(_dump(cfg))


# --------------------------------------------------------------------------- simulate


def _simulate_config(args) -> DgpConfig:
    base = DgpConfig.from_json(args.config) if args.config else DgpConfig()
    changes = {}
    for flag, name in (
        ("F", "F"),
        ("K", "K"),
        ("T", "T"),
        ("T0", "T0"),
        ("regime", "factor_regime"),
        ("errors", "error_kind"),
        ("phi", "phi"),
        ("seed", "seed"),
        ("contamination", "contamination"),
        ("noise_scale", "noise_scale"),
    ):
        value = getattr(args, flag)
        if value is not None:
            changes[name] = value
    if args.covariates:
        changes["with_covariates"] = True
    return base.replace(**changes) if changes else base


def cmd_simulate(args) -> int:
    try:
        cfg = _simulate_config(args)
    except BadConfig as exc:
        if args.config:
            raise
        raise UsageError(str(exc)) from None
    _print_config("simulate", {**cfg.to_dict(), "out": args.out})
    panel, latents = simulate_with_latents(cfg)
    out = Path(args.out)
    truth_path = out.with_name(out.stem + ".truth.json")
    truth = {**true_parameters(cfg, latents), "T0": cfg.T0, "config": cfg.to_dict()}
    try:
        save_panel(panel, out)
        truth_path.write_text(_dump(truth) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write output: {exc}") from None
    print(f"wrote {out} ({panel.T} rows) and {truth_path}")
    return EXIT_OK


# --------------------------------------------------------------------------- estimate


def _text_report(rep: dict) -> str:
    lines = [f"method {rep['method']}  T={rep['T']}  T0={rep['T0']}  q={rep['q']}  p={rep['p']}"]
    lines.append(f"weight {rep['weight']}  covariance {rep['cov']}  converged {rep['converged']}")
    lines.append("")
    lines.append(f"{'parameter':<14}{'estimate':>14}{'std.err':>14}")
    for name, value in rep["estimates"].items():
        lines.append(f"{name:<14}{value:>14.6f}{rep['se'][name]:>14.6f}")
    lo, hi = rep["tau_ci"]
    lines.append("")
    lines.append(f"tau {rep['tau']:.6f}  {100 * rep['ci_level']:.0f}% CI [{lo:.6f}, {hi:.6f}]")
    for key in rep:
        if key.startswith(("tau_window", "tau_lift")) and not key.endswith(("_se", "_ci")):
            a, b = rep[f"{key}_ci"]
            lines.append(f"{key} {rep[key]:.6f}  se {rep[key + '_se']:.6f}  CI [{a:.6f}, {b:.6f}]")
    if rep["df"] > 0:
        lines.append(f"J {rep['J']:.6f}  df {rep['df']}  p-value {rep['J_pvalue']:.6f}")
    lines.append(f"jacobian condition number {rep['diagnostics']['jacobian_condition']:.3e}")
    return "\n".join(lines)


def cmd_estimate(args) -> int:
    instruments = InstrumentChoice(constant=args.constant, squares=args.squares)
    config = {
        "panel": args.panel,
        "t0": args.t0,
        "method": args.method,
        "se": args.se,
        "bandwidth": args.bandwidth,
        "weights": args.weights or "auto",
        "windows": [list(w) for w in args.window or []],
        "lifts": [list(w) for w in args.lift or []],
        "level": args.level,
        "instruments": {"constant": args.constant, "squares": args.squares},
        "out": args.out,
    }
    if args.out == "text":
        _print_config("estimate", config)
    try:
        panel = load_panel(args.panel, args.t0)
    except OSError as exc:
        raise DataError(f"cannot read panel: {exc}") from None
    est = estimate(
        panel,
        args.method,
        cov=CovSpec.parse(args.se, args.bandwidth),
        weights=args.weights,
        instruments=instruments,
        windows=[tuple(w) for w in args.window or []],
        lifts=[tuple(w) for w in args.lift or []],
        level=args.level,
    )
    rep = est.report()
    if args.out == "json":
        print(_dump({"config": config, "result": rep}))
    else:
        print(_text_report(rep))
    return EXIT_OK


# --------------------------------------------------------------------------- montecarlo


def cmd_montecarlo(args) -> int:
    cfg = McConfig.from_json(args.config) if args.config else McConfig()
    changes = {}
    if args.reps is not None:
        if args.reps < 1:
            raise UsageError("--reps must be >= 1")
        changes["reps"] = args.reps
    if args.jobs is not None:
        changes["jobs"] = args.jobs
    if args.seed is not None:
        changes["base_seed"] = args.seed
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
    out_dir = Path(args.out_dir)
    _print_config("montecarlo", {**cfg.to_dict(), "out_dir": str(out_dir), "format": args.format})
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out_dir}: {exc}") from None

    report = run_mc(cfg)
    ext = "csv" if args.format == "csv" else "md"
    try:
        for metric in METRICS:
            (out_dir / f"{metric}.{ext}").write_text(emit_table(report, metric, args.format))
        (out_dir / "results.json").write_text(_dump(report.to_dict()) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write results: {exc}") from None
    print(emit_table(report, "mse", "markdown"))
    print(emit_table(report, "coverage", "markdown"))
    print(f"elapsed {report.elapsed:.1f}s  failures {report.failures}  nonconverged {report.nonconverged}")
    print(f"tables written to {out_dir}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def _window(parser_name: str):
    def conv(value: str) -> int:
        try:
            return int(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{parser_name} bounds must be integers") from None

    return conv


def _bandwidth(value: str):
    if value == "auto":
        return value
    try:
        b = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("bandwidth must be 'auto' or a non-negative integer") from None
    if b < 0:
        raise argparse.ArgumentTypeError("bandwidth must be non-negative")
    return b


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="proxsc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw a panel from the factor-model DGP")
    p.add_argument("--config", help="JSON DGP config; flags override its fields")
    p.add_argument("--F", type=int, help="number of donor factors")
    p.add_argument("--K", type=int, help="number of effect factors")
    p.add_argument("--T", type=int, help="number of periods")
    p.add_argument("--T0", type=int, help="last pre-intervention period")
    p.add_argument("--regime", choices=("stationary", "logtrend"))
    p.add_argument("--errors", choices=("iid", "ar1"))
    p.add_argument("--phi", type=float, help="AR(1) coefficient")
    p.add_argument("--covariates", action="store_true", help="add observed covariates")
    p.add_argument("--contamination", type=float, help="donor-factor loading of the surrogates")
    p.add_argument("--noise-scale", dest="noise_scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output CSV; truth goes to <stem>.truth.json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate the ATT on a CSV panel")
    p.add_argument("--panel", required=True)
    p.add_argument("--t0", type=int, required=True, help="last pre-intervention period")
    p.add_argument("--method", required=True, choices=[k.value for k in EstimatorKind])
    p.add_argument("--se", choices=("robust", "hac"), default="robust")
    p.add_argument("--bandwidth", type=_bandwidth, default="auto")
    p.add_argument("--weights", choices=("identity", "twostep"))
    p.add_argument("--window", nargs=2, type=_window("--window"), action="append", metavar=("T1", "T2"))
    p.add_argument("--lift", nargs=2, type=_window("--lift"), action="append", metavar=("T1", "T2"))
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--constant", action="store_true", help="add a constant to the proxy instruments")
    p.add_argument("--squares", action="store_true", help="add squared proxies (overidentifies)")
    p.add_argument("--out", choices=("json", "text"), default="json")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("montecarlo", help="run a Monte Carlo experiment")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--out-dir", dest="out_dir", default="mc_out")
    p.add_argument("--format", choices=("csv", "markdown"), default="csv")
    p.add_argument("--jobs", type=int, help="maximum worker processes")
    p.set_defaults(func=cmd_montecarlo)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        print(_dump({"error": type(exc).__name__, "message": str(exc), **_diagnostic(exc)}))
        return EXIT_NUMERICAL
    except (DataError, ProxscError) as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def _diagnostic(exc: NumericalError) -> dict:
    out = {}
    for name in ("condition_number", "grad_norm", "iterations", "baseline"):
        value = getattr(exc, name, None)
        if value is not None:
            out[name] = value if not isinstance(value, float) or math.isfinite(value) else str(value)
    return out


if __name__ == "__main__":
    sys.exit(main())

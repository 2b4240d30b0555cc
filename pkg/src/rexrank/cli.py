"""``rexrank`` command line.

Subcommands: ``rank-study``, ``search``, ``build``, ``cost`` and ``fit``.
Summaries go to stdout, artifacts to ``--out``. Every artifact records the
tool version, seed and the full flag set.

Exit codes: 0 success, 2 usage or parse error, 3 infeasible budget,
1 anything else.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .archspec import (
    CalibrationError,
    MULTIPLIER_RANGE,
    build_rexnet,
    build_rexnet_lite,
    build_rexnet_plain,
    calibrate_linear,
    fit_linear,
    lite_layout,
    plain_layout,
    rexnet_layout,
)
from .costmodel import Budget, ConfigParseError, config_to_spec, model_cost, parse_config_string
from .modelspec import SpecFormatError, export_spec, import_spec, spec_to_dict
from .numerics import NONLINEARITIES, Kind, Nonlinearity, RankSettings, round_half_away
from .randnet import LayerArch, LayerKind, RankCurve, SweepSpec, emit_curve_csv, run_sweep
from .search import External, RankScore, SearchInfeasible, SearchSpec, emit_run, format_channels, run_search

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_INFEASIBLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --- argument types ----------------------------------------------------------------


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _width(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    lo, hi = MULTIPLIER_RANGE
    if not lo <= v <= hi:
        raise argparse.ArgumentTypeError(f"width multiplier must be in [{lo}, {hi}], got {v}")
    return v


def _tolerance(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"tolerance must lie in (0, 1), got {v}")
    return v


def _ratios(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratio list: {text!r}") from None


def _channels(text: str) -> list[int]:
    parts = [p.strip() for p in text.split(",")]
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad channel list {text!r}: expected comma-separated integers") from None
    if len(values) < 2:
        raise argparse.ArgumentTypeError(f"need at least 2 channel widths, got {len(values)}")
    return values


# --- helpers -----------------------------------------------------------------------


def _metadata(args: argparse.Namespace) -> dict:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    meta = {"tool": "rexrank", "version": __version__, "command": args.command, "seed": getattr(args, "seed", None)}
    for k, v in flags.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        meta[k] = v
    return meta


def _csv_meta(meta: dict) -> dict:
    # CSV comment lines are space separated, so keep each value a single token
    return {k: str(v).replace(" ", "_") for k, v in meta.items()}


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8", newline="\n")


# --- rank-study --------------------------------------------------------------------


def _trend_lines(curves: dict[str, RankCurve], tolerance: float) -> list[str]:
    lines = [f"tolerance={tolerance:g}"]
    nonid = {k: c for k, c in curves.items() if k != Kind.IDENTITY.value}
    for name, c in nonid.items():
        lo, hi = c.points[0], c.points[-1]
        ok = hi.mean_rank_ratio >= lo.mean_rank_ratio
        lines.append(f"{'PASS' if ok else 'FAIL'} obs-i {name}: mean rank ratio {lo.mean_rank_ratio:.4f} at "
                     f"r={lo.ratio:g} vs {hi.mean_rank_ratio:.4f} at r={hi.ratio:g}")
    for name, c in nonid.items():
        worst = min(c.points, key=lambda p: p.mean_rank_ratio - p.ratio)
        ok = all(p.mean_rank_ratio >= p.ratio - 0.02 for p in c.points)
        lines.append(f"{'PASS' if ok else 'FAIL'} obs-ii {name}: min(mean - r) = "
                     f"{worst.mean_rank_ratio - worst.ratio:+.4f} at r={worst.ratio:g} (bound -0.02)")
    if Kind.IDENTITY.value in curves:
        c = curves[Kind.IDENTITY.value]
        dev = max(abs(p.mean_rank_ratio - p.ratio) for p in c.points)
        lines.append(f"INFO identity control: max |mean - r| = {dev:.4f}")
    base = curves.get(Kind.RELU6.value)
    for name in (Kind.SILU.value, Kind.ELU.value):
        if base is None or name not in curves:
            lines.append(f"SKIP obs-iii {name} >= relu6: both curves needed")
            continue
        a, b = curves[name].points[0], base.points[0]
        margin = a.mean_rank_ratio - b.mean_rank_ratio
        lines.append(f"{'PASS' if margin >= 0 else 'FAIL'} obs-iii {name} >= relu6 at r={a.ratio:g}: "
                     f"{a.mean_rank_ratio:.4f} vs {b.mean_rank_ratio:.4f} (margin {margin:+.4f})")
    return lines


def cmd_rank_study(args: argparse.Namespace) -> int:
    if args.all == bool(args.nonlinearity):
        raise UsageError("give exactly one of --nonlinearity or --all")
    names = list(NONLINEARITIES) if args.all else [Nonlinearity.parse(args.nonlinearity).name]
    out = _out_dir(args)
    meta = _metadata(args)
    settings = RankSettings(args.tolerance)
    curves = {}
    for name in names:
        try:
            spec = SweepSpec(LayerArch(args.arch), Nonlinearity.parse(name), ratio_grid=args.ratios,
                             trials=args.trials, master_seed=args.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        curve = run_sweep(spec, settings)
        curves[name] = curve
        emit_curve_csv(curve, out / f"rank_{args.arch}_{name}.csv", metadata=_csv_meta({**meta, "nonlinearity": name}))
        print(f"{args.arch:8s} {name:10s} " + " ".join(f"{p.mean_rank_ratio:.3f}" for p in curve.points))
    lines = ["# " + " ".join(f"{k}={v}" for k, v in _csv_meta(meta).items())] + _trend_lines(curves, args.tolerance)
    (out / "trends.txt").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    for ln in lines[1:]:
        print(ln)
    return EXIT_OK


# --- search ------------------------------------------------------------------------


def cmd_search(args: argparse.Namespace) -> int:
    if args.max_params is None and args.max_macs is None:
        raise UsageError("give at least one of --max-params / --max-macs")
    if args.fitness == "external":
        if not args.exchange_dir:
            raise UsageError("--fitness external requires --exchange-dir")
        fitness = External(args.exchange_dir, timeout=args.timeout)
    else:
        fitness = RankScore(trials=args.trials, settings=RankSettings(args.tolerance))
    try:
        spec = SearchSpec(args.depth, Budget(args.max_params, args.max_macs), args.n, max_pieces=args.max_pieces,
                          fitness=fitness, master_seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run = run_search(spec)
    emit_run(run, _out_dir(args), metadata=_metadata(args))
    b, w = run.best, run.worst
    print(f"best  {format_channels(b.channels)}  score={b.score:.6g} params={b.cost.params} macs={b.cost.macs}")
    print(f"worst {format_channels(w.channels)}  score={w.score:.6g} params={w.cost.params} macs={w.cost.macs}")
    for name, bucket in run.deciles.items():
        print(f"{name:8s} n={len(bucket.members)} score={bucket.mean_score:.4f}±{bucket.std_score:.4f} "
              f"channels={format_channels(round_half_away(c) for c in bucket.mean_channels)}")
    return EXIT_OK


# --- build -------------------------------------------------------------------------


_FAMILIES = {
    "rexnet": (build_rexnet, rexnet_layout),
    "plain": (build_rexnet_plain, plain_layout),
    "lite": (build_rexnet_lite, lite_layout),
}


def cmd_build(args: argparse.Namespace) -> int:
    builder, layout_fn = _FAMILIES[args.family]
    m = args.width
    linear = None
    if args.calibrate_params is not None or args.calibrate_macs is not None:
        stem = round_half_away(32 * m)
        layout = layout_fn(stem=stem) if args.family == "plain" else \
            layout_fn(stem=stem, penultimate=max(1280, round_half_away(1280 * m)))
        cal = calibrate_linear(layout, Budget(args.calibrate_params, args.calibrate_macs), args.resolution)
        # builders scale the x1.0 line by the multiplier, so hand them the unscaled line
        linear = cal.param.scaled(1.0 / m)
    spec = builder(m, linear=linear)
    report = model_cost(spec, args.resolution)
    out = _out_dir(args)
    meta = _metadata(args)
    doc = spec_to_dict(spec)
    export_spec(spec, out / f"{spec.name}.json")
    _write_json(out / f"{spec.name}.cost.json", {"metadata": meta, **report.to_dict()})
    print(f"{spec.name}  params={report.params}  macs={report.macs}  "
          f"channels={format_channels(spec.channels)}")
    # the model file itself follows the published schema, so its metadata lives alongside
    _write_json(out / f"{spec.name}.meta.json", {"metadata": meta, "schema": doc["schema"]})
    return EXIT_OK


# --- cost --------------------------------------------------------------------------


def cmd_cost(args: argparse.Namespace) -> int:
    if args.config is not None:
        spec = config_to_spec(parse_config_string(args.config))
    else:
        spec = import_spec(args.spec)
    classes = args.classes if args.classes is not None else spec.head.classes
    try:
        report = model_cost(spec, args.resolution, classes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write_json(_out_dir(args) / "cost.json", {"metadata": _metadata(args), **report.to_dict()})
    print(f"params={report.params} ({report.params / 1e6:.3f}M)  macs={report.macs} ({report.macs / 1e9:.3f}B)")
    return EXIT_OK


# --- fit ---------------------------------------------------------------------------


def cmd_fit(args: argparse.Namespace) -> int:
    fit = fit_linear(args.channels)
    _write_json(_out_dir(args) / "fit.json", {"metadata": _metadata(args), "slope": fit.slope,
                                              "intercept": fit.intercept, "rms_residual": fit.rms_residual})
    print(f"slope={fit.slope:.6g} intercept={fit.intercept:.6g} rms={fit.rms_residual:.6g}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rexrank", description="Rank-expansion analysis, channel search and "
                                                            "ReXNet-family cost accounting.")
    p.add_argument("--version", action="version", version=f"rexrank {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=42)
        sp.add_argument("--out", default="./out")

    sp = sub.add_parser("rank-study", help="rank ratio vs dimension ratio sweeps")
    sp.add_argument("--arch", choices=[k.value for k in LayerKind], required=True)
    sp.add_argument("--nonlinearity", choices=sorted(NONLINEARITIES))
    sp.add_argument("--all", action="store_true", help="sweep every nonlinearity")
    sp.add_argument("--trials", type=_positive_int, default=200)
    sp.add_argument("--ratios", type=_ratios, default=SweepSpec.ratio_grid, help="comma-separated, in [0.1, 1]")
    sp.add_argument("--tolerance", type=_tolerance, default=1e-2)
    common(sp)
    sp.set_defaults(func=cmd_rank_study)

    sp = sub.add_parser("search", help="budget-constrained channel search")
    sp.add_argument("--depth", type=_positive_int, required=True)
    sp.add_argument("--max-params", type=_positive_int)
    sp.add_argument("--max-macs", type=_positive_int)
    sp.add_argument("--n", type=_positive_int, default=200)
    sp.add_argument("--max-pieces", type=_positive_int, default=3)
    sp.add_argument("--fitness", choices=["rank", "external"], default="rank")
    sp.add_argument("--trials", type=_positive_int, default=RankScore.trials)
    sp.add_argument("--tolerance", type=_tolerance, default=RankScore.settings.rel_tolerance)
    sp.add_argument("--exchange-dir")
    sp.add_argument("--timeout", type=float, default=3600.0)
    common(sp)
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("build", help="build a ReXNet-family spec and its cost report")
    sp.add_argument("--family", choices=sorted(_FAMILIES), default="rexnet")
    sp.add_argument("--width", type=_width, default=1.0)
    sp.add_argument("--calibrate-params", type=_positive_int)
    sp.add_argument("--calibrate-macs", type=_positive_int)
    sp.add_argument("--resolution", type=_positive_int, default=224)
    common(sp)
    sp.set_defaults(func=cmd_build)

    sp = sub.add_parser("cost", help="params/MACs of a spec file or config string")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec")
    src.add_argument("--config")
    sp.add_argument("--resolution", type=_positive_int, default=224)
    sp.add_argument("--classes", type=_positive_int)
    common(sp)
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("fit", help="least-squares line through channel widths")
    sp.add_argument("--channels", type=_channels, required=True)
    common(sp)
    sp.set_defaults(func=cmd_fit)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rexrank {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigParseError as exc:
        print(f"rexrank {args.command}: config parse error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SpecFormatError as exc:
        print(f"rexrank {args.command}: bad spec: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CalibrationError, SearchInfeasible) as exc:
        print(f"rexrank {args.command}: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Exception as exc:  # noqa: BLE001 - last-resort reporting for the CLI contract
        print(f"rexrank {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

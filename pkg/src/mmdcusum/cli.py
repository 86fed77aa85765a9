"""Command-line entry point.

Every subcommand reads its defaults from an optional INI file (section
``[common]`` plus a section named after the subcommand), lets flags
override them, and writes ``<subcommand>.manifest.json`` into the output
directory with the resolved settings, the package version and the seed.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Iterator, List, Optional, TextIO

import numpy as np

from . import __version__
from .calibration import calibrate_delta
from .cusum import DetectorConfig, run_to_stop
from .errors import InputError, MMDCusumError
from .experiments import (
    ADD, ARL, ExperimentConfig, emit_outputs, fit_scaling, null_statistic_mean, pilot_range, run_add, run_arl,
    threshold_grid,
)
from .kernels import FAMILIES, RATIONAL_QUADRATIC, resolve_kernel
from .mixing import KINDS, verify_bound
from .mmd import BIASED, STATISTIC_KINDS, load_reference, reference_build, save_reference
from .procsim import ChangedSource, ChangeScenario, IIDGaussianConfig, Source, benchmark_scenarios, benchmark_system
from .seeding import derive_int

log = logging.getLogger("mmdcusum")

EXIT_OK, EXIT_ERROR, EXIT_ALARM = 0, 1, 2
SYSTEMS = ("linear", "linear-truncated", "iid")
SCENARIOS = ("none", "mean-shift", "variance-change")
DEFAULT_H = 10_000
DEFAULT_CHAIN = "[[0.9, 0.1], [0.2, 0.8]]"


# ---------------------------------------------------------------------------
# Stream ingestion


def _parse_row(fields: List[str], lineno: int) -> np.ndarray:
    vals = []
    for k, raw in enumerate(fields, start=1):
        try:
            v = float(raw)
        except ValueError:
            raise InputError(f"line {lineno}, field {k}: non-numeric value {raw.strip()!r}") from None
        if not math.isfinite(v):
            raise InputError(f"line {lineno}, field {k}: non-finite value {raw.strip()!r}")
        vals.append(v)
    return np.array(vals)


def ingest_stream(handle: TextIO) -> Iterator[np.ndarray]:
    """Lazily yield rows of a headerless CSV of floats as 1-d arrays.

    Blank lines are skipped.  Ragged rows, non-numeric fields and NaN/Inf
    raise :class:`InputError` naming the line.
    """
    dim = None
    for lineno, fields in enumerate(csv.reader(handle), start=1):
        if not fields or all(not f.strip() for f in fields):
            continue
        row = _parse_row(fields, lineno)
        if dim is None:
            dim = row.shape[0]
        elif row.shape[0] != dim:
            raise InputError(f"line {lineno}: expected {dim} fields, found {row.shape[0]}")
        yield row


def _open_input(path: str) -> TextIO:
    if path == "-":
        return sys.stdin
    p = Path(path)
    if not p.is_file():
        raise InputError(f"input file not found: {path}")
    return p.open("r", encoding="utf-8", newline="")


def write_rows(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# Helpers


def make_source(system: str, burn_in: Optional[int] = None) -> Source:
    if system == "iid":
        return IIDGaussianConfig(mean=0.0, cov=1.0, d=1)
    kw = {} if burn_in is None else {"burn_in": burn_in}
    return benchmark_system(truncated=system == "linear-truncated", **kw)


def make_scenario(source: Source, scenario: str, tau: int = 0):
    if scenario == "none":
        return None
    if isinstance(source, IIDGaussianConfig):
        post = source.replace(mean=1.0) if scenario == "mean-shift" else source.replace(cov=4.0)
    else:
        post = benchmark_scenarios(source)[scenario].post
    return ChangeScenario(tau, post)


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _ints(text: str) -> List[int]:
    return [int(v) for v in _floats(text)]


def _sigma(text: str):
    if str(text).strip().lower() == "median":
        return "median"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"sigma must be a positive number or 'median', got {text!r}") from None


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(args, extra: Optional[dict] = None) -> Path:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    payload = {
        "subcommand": args.command,
        "version": __version__,
        "seed": args.seed,
        "config": resolved,
    }
    if extra:
        payload["resolved"] = extra
    path = _out(args) / f"{args.command}.manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _load_calibration(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise InputError(f"calibration file not found: {path}")
    return json.loads(p.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simulate(args) -> int:
    src = make_source(args.system, args.burn_in)
    scen = make_scenario(src, args.scenario, args.tau)
    seed = derive_int(args.seed, "simulate")
    if scen is not None:
        src = ChangedSource(src, scen)
    data = src.sample(seed, args.n)
    path = Path(args.output) if args.output else _out(args) / "stream.csv"
    write_rows(path, data)
    write_manifest(args, {"output": str(path), "source": src.to_dict(), "derived_seed": seed})
    log.info("wrote %d samples to %s", args.n, path)
    return EXIT_OK


def cmd_build_reference(args) -> int:
    with _open_input(args.input) as fh:
        rows = []
        for k, row in enumerate(ingest_stream(fh)):
            if k < args.skip:
                continue
            rows.append(row)
            if len(rows) == args.h:
                break
    if len(rows) < args.h:
        raise InputError(f"need h={args.h} samples after skipping {args.skip}, only {len(rows)} available "
                         f"(short by {args.h - len(rows)})")
    X = np.vstack(rows)
    kernel = resolve_kernel({"family": args.kernel, "sigma": args.sigma}, X, seed=derive_int(args.seed, "median"))
    ref = reference_build(kernel, X)
    path = Path(args.output) if args.output else _out(args) / "reference.bin"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_reference(path, ref)
    log.info("reference written to %s (h=%d, self_term=%.17g)", path, ref.h, ref.self_term)
    write_manifest(args, {"output": str(path), "kernel": kernel.to_dict(), "self_term": ref.self_term,
                          "h": ref.h, "dim": ref.dim})
    return EXIT_OK


def cmd_calibrate(args) -> int:
    ref = load_reference(args.reference)
    src = make_source(args.system, args.burn_in)
    config = DetectorConfig(r=args.r, delta=args.grid[0], b=args.b, M=args.M, statistic_kind=args.statistic)
    report = calibrate_delta(ref, lambda s: src.stream(s), config, args.target_arl, args.grid, args.reps,
                             derive_int(args.seed, "calibrate"), n_splits=args.n_splits,
                             enforce_floor=not args.no_floor)
    out = _out(args)
    (out / "calibration.json").write_text(report.to_json() + "\n", encoding="utf-8")
    with (out / "calibration.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["delta", "arl", "stderr", "censored"])
        for d, a, s, c in report.csv_rows():
            w.writerow([repr(d), repr(a), repr(s), c])
    write_manifest(args, {"chosen_delta": report.chosen_delta, "c_estimate": report.c_estimate,
                          "run_cap": report.run_cap})
    print(json.dumps({"chosen_delta": report.chosen_delta, "c_estimate": report.c_estimate}))
    return EXIT_OK


def cmd_detect(args) -> int:
    if not Path(args.reference).is_file():
        raise InputError(f"reference file not found: {args.reference}")
    cal = _load_calibration(args.calibration)
    r = args.r if args.r is not None else cal.get("r")
    delta = args.delta if args.delta is not None else cal.get("chosen_delta")
    b = args.b if args.b is not None else cal.get("b")
    M = args.M if args.M is not None else cal.get("M")
    if r is None or delta is None or b is None:
        raise InputError("r, delta and b must be given as flags or through --calibration")
    ref = load_reference(args.reference)
    config = DetectorConfig(r=int(r), delta=float(delta), b=float(b), M=None if M is None else int(M),
                            statistic_kind=args.statistic)
    with _open_input(args.input) as fh:
        budget = args.max_samples if args.max_samples is not None else sys.maxsize
        report = run_to_stop(ingest_stream(fh), config, ref, budget, trace=bool(args.trace), seed=args.seed)
    if args.trace:
        with Path(args.trace).open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "increment", "s", "s_hat", "alarmed"])
            for rec in report.trace:
                w.writerow([rec.t, repr(rec.increment), repr(rec.s), repr(rec.s_hat), int(rec.alarmed)])
    write_manifest(args, {"detector": config.to_dict(), "kernel": ref.kernel.to_dict()})
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_ALARM if report.alarmed else EXIT_OK


def _experiment(args, metric: str) -> int:
    ref = load_reference(args.reference)
    src = make_source(args.system, args.burn_in)
    scen = make_scenario(src, args.scenario) if metric == ADD else None
    if metric == ADD and scen is None:
        raise InputError("experiment-add needs --scenario mean-shift or variance-change")
    offsets = list(args.offsets)
    m0 = None
    if args.relative_offsets:
        m0 = null_statistic_mean(src, ref, args.r, derive_int(args.seed, "offset-pilot"),
                                 statistic_kind=args.statistic)
        offsets = [m0 + d for d in offsets]
    base = dict(offsets=offsets, r=args.r, source=src, run_cap=args.run_cap, scenario=scen, M=args.M,
                replications=args.replications, statistic_kind=args.statistic,
                seed=derive_int(args.seed, "experiment"), name=args.name)
    thresholds = args.thresholds
    if not thresholds:
        probe = ExperimentConfig(thresholds=[1.0], **base)
        thresholds = threshold_grid([pilot_range(probe, ref)], args.n_thresholds)
    config = ExperimentConfig(thresholds=thresholds, **base)
    result = (run_add if metric == ADD else run_arl)(config, ref, workers=args.workers)
    result.meta["null_mean_pilot"] = m0
    try:
        fits = fit_scaling(result, "identity" if metric == ADD else "log10")
    except MMDCusumError as exc:
        log.warning("fit skipped: %s", exc)
        fits = {}
    paths = emit_outputs(result, _out(args), args.name, fits)
    write_manifest(args, {"thresholds": thresholds, "offsets": offsets, "null_mean_pilot": m0,
                          "kernel": ref.kernel.to_dict(), "outputs": {k: str(v) for k, v in paths.items()}})
    return EXIT_OK


def cmd_experiment_arl(args) -> int:
    return _experiment(args, ARL)


def cmd_experiment_add(args) -> int:
    return _experiment(args, ADD)


def cmd_verify_concentration(args) -> int:
    P = np.asarray(json.loads(args.chain), dtype=float)
    f = np.asarray(json.loads(args.f), dtype=float) if args.f else (np.arange(P.shape[0]) == 0).astype(float)
    kinds = KINDS if args.kind == "all" else (args.kind,)
    out = _out(args)
    rows, ok = [], True
    for kind in kinds:
        for n in args.n:
            rep = verify_bound(P, f, kind, args.epsilons, n, args.reps, derive_int(args.seed, "verify", KINDS.index(kind), n))
            ok &= rep.all_dominated
            for row in rep.rows():
                rows.append((kind, n) + tuple(row))
    with (out / "concentration.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "n", "epsilon", "empirical_tail", "stderr", "bound", "dominated"])
        for row in rows:
            w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:6]] + [int(bool(row[6]))])
    write_manifest(args, {"all_dominated": bool(ok)})
    print(json.dumps({"all_dominated": bool(ok), "rows": len(rows)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _detector_flags(p: argparse.ArgumentParser, required_r: bool = True) -> None:
    p.add_argument("--r", type=int, default=50 if required_r else None, help="block size")
    p.add_argument("--M", type=int, default=None, help="minimum samples before an alarm (default r)")
    p.add_argument("--statistic", choices=STATISTIC_KINDS, default=BIASED)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmdcusum", description="Kernel MMD-CUSUM change detection.")
    parser.add_argument("--seed", type=int, default=0, help="global seed")
    parser.add_argument("--out-dir", default=".", help="directory for outputs and manifests")
    parser.add_argument("--config", default=None, help="INI file with [common] and per-subcommand sections")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated stream as CSV")
    p.add_argument("--system", choices=SYSTEMS, default="linear")
    p.add_argument("--scenario", choices=SCENARIOS, default="none")
    p.add_argument("--tau", type=int, default=0)
    p.add_argument("-n", type=int, default=DEFAULT_H)
    p.add_argument("--burn-in", type=int, default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("build-reference", help="persist a reference set from a CSV stream")
    p.add_argument("--input", default="-")
    p.add_argument("--h", type=int, default=DEFAULT_H)
    p.add_argument("--skip", type=int, default=0, help="burn-in rows to drop first")
    p.add_argument("--kernel", choices=FAMILIES, default=RATIONAL_QUADRATIC)
    p.add_argument("--sigma", type=_sigma, default=1.0)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_build_reference)

    p = sub.add_parser("calibrate", help="choose the offset by simulated ARL")
    p.add_argument("--reference", required=False)
    p.add_argument("--system", choices=SYSTEMS, default="linear")
    p.add_argument("--burn-in", type=int, default=None)
    _detector_flags(p)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--target-arl", type=float, default=1000.0)
    p.add_argument("--grid", type=_floats, default=[0.7, 0.8, 0.9, 1.0])
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--n-splits", type=int, default=200)
    p.add_argument("--no-floor", action="store_true", help="allow grid values below the null-level estimate")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", help="run the detector on a CSV stream")
    p.add_argument("--reference", required=False)
    p.add_argument("--input", default="-")
    _detector_flags(p, required_r=False)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--b", type=float, default=None)
    p.add_argument("--calibration", default=None, help="calibration.json supplying r, delta, b, M")
    p.add_argument("--max-samples", type=int, default=None)
    p.add_argument("--trace", default=None, help="CSV path for the per-block trace")
    p.set_defaults(func=cmd_detect)

    for name, func, default_scen in (("experiment-arl", cmd_experiment_arl, "none"),
                                      ("experiment-add", cmd_experiment_add, "mean-shift")):
        p = sub.add_parser(name, help=f"{name.split('-')[1].upper()} sweep over thresholds and offsets")
        p.add_argument("--reference", required=False)
        p.add_argument("--system", choices=SYSTEMS, default="linear")
        p.add_argument("--burn-in", type=int, default=None)
        if default_scen != "none":
            p.add_argument("--scenario", choices=SCENARIOS[1:], default=default_scen)
        _detector_flags(p)
        p.add_argument("--thresholds", type=_floats, default=None, help="default: pilot-chosen grid")
        p.add_argument("--n-thresholds", type=int, default=8)
        p.add_argument("--offsets", type=_floats, default=[0.0, 0.01, 0.02])
        p.add_argument("--relative-offsets", action="store_true",
                       help="add a pilot estimate of the null statistic mean to every offset")
        p.add_argument("--replications", type=int, default=50)
        p.add_argument("--run-cap", type=int, default=100_000)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--name", default=name.split("-")[1])
        p.set_defaults(func=func)

    p = sub.add_parser("verify-concentration", help="Monte Carlo check of the mixing tail bounds")
    p.add_argument("--chain", default=DEFAULT_CHAIN, help="transition matrix as JSON")
    p.add_argument("--f", default=None, help="function values per state as JSON (default: indicator of state 0)")
    p.add_argument("--kind", choices=KINDS + ("all",), default="all")
    p.add_argument("--n", type=_ints, default=[100, 500])
    p.add_argument("--epsilons", type=_floats, default=[0.05, 0.1, 0.15, 0.2, 0.25, 0.3])
    p.add_argument("--reps", type=int, default=10_000)
    p.set_defaults(func=cmd_verify_concentration)
    return parser


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _apply_config(parser: argparse.ArgumentParser, argv: List[str]) -> None:
    """Turn INI values into parser defaults so that explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return
    path = Path(known.config)
    if not path.is_file():
        raise InputError(f"config file not found: {known.config}")
    ini = configparser.ConfigParser()
    ini.read(path, encoding="utf-8")
    command = next((a for a in rest if not a.startswith("-") and a in _subparsers(parser)), None)
    targets = [("common", parser)]
    if command:
        targets.append(("common", _subparsers(parser)[command]))
        targets.append((command, _subparsers(parser)[command]))
    for section, target in targets:
        if not ini.has_section(section):
            continue
        actions = {a.dest: a for a in target._actions}
        values = {}
        for key, raw in ini.items(section):
            dest = key.replace("-", "_")
            if dest not in actions:
                continue
            act = actions[dest]
            if act.nargs == 0:
                low = raw.strip().lower()
                if low not in _TRUE | _FALSE:
                    raise InputError(f"config [{section}] {key}: expected a boolean, got {raw!r}")
                values[dest] = low in _TRUE
            else:
                values[dest] = act.type(raw) if act.type else raw
        target.set_defaults(**values)


def _subparsers(parser: argparse.ArgumentParser) -> dict:
    for act in parser._actions:
        if isinstance(act, argparse._SubParsersAction):
            return act.choices
    return {}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (MMDCusumError, ValueError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for needed in ("reference",):
        if hasattr(args, needed) and args.command != "build-reference" and getattr(args, needed) is None:
            print(f"error: --{needed} is required for {args.command}", file=sys.stderr)
            return EXIT_ERROR
    try:
        return args.func(args)
    except (MMDCusumError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

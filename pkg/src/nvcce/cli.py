"""Command-line entry point: ``nvcce <subcommand> ...``.

Exit codes: 0 success, 2 invalid input, 3 too many failed configurations
(or a failed oracle check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bath import ConfigurationError, generate_configuration, save_configuration
from .engine import CoherenceCurve
from .ensemble import bootstrap_subsample, ensemble_average
from .fitting import METHODS, FitError, fit_curve
from .seeds import BATH_STREAM, derive_seed
from . import workflows as wf

EXIT_OK, EXIT_INVALID, EXIT_COMPUTE = 0, 2, 3


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="RunConfig JSON file; flags below override it")
    p.add_argument("--ppm", type=float, nargs="+")
    p.add_argument("--order", type=int)
    p.add_argument("--rbath", help="bath radius in A or 'auto'")
    p.add_argument("--rdipole", help="pair cutoff in A or 'auto'")
    p.add_argument("--field", type=float, help="field along the NV axis (G)")
    p.add_argument("--scale", choices=sorted(wf.SCALES))
    p.add_argument("--configs", type=int, dest="n_configs")
    p.add_argument("--samples", type=int, dest="n_mc_samples")
    p.add_argument("--times", type=int, dest="n_times", help="number of time points")
    p.add_argument("--tmax", type=float, dest="t_max_ms", help="largest total echo time (ms)")
    p.add_argument("--fit-methods", nargs="+", choices=METHODS)
    p.add_argument("--lf", type=float, nargs="+", dest="l_f")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--workers", type=int)


def _radius(v):
    if v is None or v == "auto":
        return v
    try:
        return float(v)
    except ValueError:
        raise wf.ValidationError(f"radius must be a number or 'auto', got {v!r}") from None


def _run_config(args) -> wf.RunConfig:
    cfg = wf.RunConfig.load(args.config) if args.config else wf.RunConfig()
    overrides = {
        "ppm": args.ppm,
        "order": args.order,
        "r_bath": _radius(args.rbath),
        "r_dipole": _radius(args.rdipole),
        "field_G": args.field,
        "n_times": args.n_times,
        "t_max_ms": args.t_max_ms,
        "fit_methods": args.fit_methods,
        "l_f": args.l_f,
        "seed": args.seed,
        "output_dir": args.output_dir,
        "workers": args.workers,
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if args.scale:
        cfg.scale = args.scale
        cfg.n_configs, cfg.n_mc_samples = wf.SCALES[args.scale]
    if args.n_configs is not None:
        cfg.n_configs = args.n_configs
    if args.n_mc_samples is not None:
        cfg.n_mc_samples = args.n_mc_samples
    cfg.validate()
    return cfg


def _emit(obj, out: str | None = None, name: str | None = None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True, default=_json_default)
    if out and name:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text)
    print(text)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _load_curves(paths) -> list[CoherenceCurve]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.glob("config_*.csv")))
        else:
            files.append(p)
    if not files:
        raise wf.ValidationError("no curve files found")
    try:
        return [CoherenceCurve.from_csv(f) for f in files]
    except (OSError, ValueError) as err:
        raise wf.ValidationError(str(err)) from err


# --- subcommands ------------------------------------------------------------


def cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = []
    for i in range(args.count):
        cfg = generate_configuration(args.ppm, args.rbath, seed=derive_seed(args.seed, BATH_STREAM, i), config_id=i)
        save_configuration(cfg, out / f"bath_{i:04d}.json")
        counts.append(len(cfg))
    _emit({"n_configs": args.count, "mean_spins": float(np.mean(counts)), "std_spins": float(np.std(counts))})
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _run_config(args)
    res = wf.run_simulation(cfg)
    _emit({f"{p:g}": {k: wf._fit_json(v) for k, v in r.fits.items()} for p, r in res.items()})
    return EXIT_OK


def cmd_average(args) -> int:
    curves = _load_curves(args.curves)
    try:
        avg = ensemble_average(curves)
    except ValueError as err:
        raise wf.ValidationError(str(err)) from err
    avg.to_csv(args.out)
    print(f"averaged {len(curves)} curves -> {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    report = {}
    for path in args.curves:
        curve = _load_curves([path])[0]
        rows = {}
        for m in args.method:
            for lf in args.lf:
                try:
                    rows[wf.fit_key(m, lf)] = fit_curve(curve, method=m, l_f=lf).to_dict()
                except FitError as err:
                    rows[wf.fit_key(m, lf)] = f"FitError: {err}"
        report[str(path)] = rows
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True))
    _emit(report)
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    curves = _load_curves(args.curves)
    try:
        rep = bootstrap_subsample(curves, args.sizes, args.repeats, args.method, args.lf, args.seed)
    except (ValueError, FitError) as err:
        raise wf.ValidationError(str(err)) from err
    if args.out:
        rep.write(args.out)
    _emit(rep.summary())
    return EXIT_OK


def cmd_scan(args) -> int:
    cfg = _run_config(args)
    orders = args.orders or [cfg.order]
    _emit(wf.scan_convergence(cfg, args.rdipole_grid, args.rbath_grid, orders, args.tol))
    return EXIT_OK


def cmd_sweep(args) -> int:
    _emit(wf.sweep_concentration(_run_config(args)))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _run_config(args)
    _emit(wf.compare_orders(cfg, args.orders, args.reference, args.order4_max_ppm))
    return EXIT_OK


def cmd_field(args) -> int:
    _emit(wf.field_sensitivity(_run_config(args), args.fields))
    return EXIT_OK


def cmd_oracle(args) -> int:
    r = wf.oracle_check(args.baths, args.min_spins, args.max_spins, args.seed)
    ok = r["max_error"] < args.tol
    verdict = "PASS" if ok else "FAIL"
    print(f"{verdict} oracle-check: {args.baths} baths, max |dL| = {r['max_error']:.3e} (tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_COMPUTE


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nvcce", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write random bath configurations as JSON")
    p.add_argument("--ppm", type=float, required=True)
    p.add_argument("--rbath", type=float, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate", help="ensemble gCCE run with fits and summary")
    _add_run_options(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("average", help="average curve CSV files")
    p.add_argument("curves", nargs="+", help="CSV files or directories of config_*.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_average)

    p = sub.add_parser("fit", help="fit stretched exponentials to curve CSV files")
    p.add_argument("curves", nargs="+")
    p.add_argument("--method", nargs="+", choices=METHODS, default=["exponential"])
    p.add_argument("--lf", type=float, nargs="+", default=[0.4])
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bootstrap", help="sub-ensemble PDFs of T2 and p deviations")
    p.add_argument("curves", nargs="+")
    p.add_argument("--sizes", type=int, nargs="+", required=True)
    p.add_argument("--repeats", type=int, default=200)
    p.add_argument("--method", choices=METHODS, default="exponential")
    p.add_argument("--lf", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("scan", help="convergence scan over r_dipole and r_bath")
    _add_run_options(p)
    p.add_argument("--rdipole-grid", type=float, nargs="+", required=True)
    p.add_argument("--rbath-grid", type=float, nargs="+", required=True)
    p.add_argument("--orders", type=int, nargs="+")
    p.add_argument("--tol", type=float, default=0.05)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("sweep", help="log T2 against log concentration")
    _add_run_options(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare-orders", help="T2 ratios between CCE orders on shared baths")
    _add_run_options(p)
    p.add_argument("--orders", type=int, nargs="+", default=[2, 3])
    p.add_argument("--reference", type=int)
    p.add_argument("--order4-max-ppm", type=float, default=wf.ORDER4_MAX_PPM)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("field-scan", help="T2 against field strength on fixed baths")
    _add_run_options(p)
    p.add_argument("--fields", type=float, nargs="+", required=True)
    p.set_defaults(func=cmd_field)

    p = sub.add_parser("oracle-check", help="gCCE against exact evolution on small baths")
    p.add_argument("--baths", type=int, default=50)
    p.add_argument("--min-spins", type=int, default=2)
    p.add_argument("--max-spins", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (wf.ValidationError, ConfigurationError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except wf.ComputeFailure as err:
        print(f"compute failure: {err}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())

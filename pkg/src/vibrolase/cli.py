"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 scan rows failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import CapacityError, ParseError, ValidationError
from .oracle import OracleSpec, save_golden, steady_state_exact
from .scan import (
    ScanConfig,
    ScanError,
    ScanResult,
    prepare_bath,
    report_json,
    resonance_report,
    run_scan,
)
from .spectral import SpectralDensity

EXIT_OK, EXIT_CONFIG, EXIT_ROWS = 0, 1, 2


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_bath(bath, out: Path) -> None:
    bath.density.write_csv(out / "spectrum.csv")
    bath.samples.write_csv(out / "bcf.csv")
    bath.model.save(out / "bathmodel.json")


def cmd_spectrum(args) -> int:
    config = ScanConfig.load(args.config)
    out = _out_dir(args.out)
    bath = prepare_bath(config)
    bath.density.write_csv(out / "spectrum.csv")
    print(f"J_eff: {bath.density.grid.size} points, integral {bath.density.integral():.6g} E_max")
    return EXIT_OK


def cmd_fit_bath(args) -> int:
    config = ScanConfig.load(args.config)
    out = _out_dir(args.out)
    bath = prepare_bath(config)
    _write_bath(bath, out)
    print(f"K={bath.model.K} fit, relative L2 residual {bath.model.residual:.3e}")
    return EXIT_OK


def _sweep_reports(result: ScanResult, density) -> list:
    sweeps = []
    for mode, n in sorted({(r.mode, r.n_emitters) for r in result.rows}):
        e, _, n_cav = result.curve(n, mode)
        ok = np.isfinite(n_cav)
        matches = resonance_report(e[ok], n_cav[ok], density if mode == "coherent" else None)
        sweeps.append({"mode": mode, "n_emitters": n,
                       "resonances": json.loads(report_json(matches))["resonances"]})
    return sweeps


def cmd_scan(args) -> int:
    config = ScanConfig.load(args.config)
    if args.workers:
        config.workers = args.workers
    out = _out_dir(args.out or config.output or ".")
    bath = prepare_bath(config)
    _write_bath(bath, out)
    try:
        result = run_scan(config, bath)
    except ScanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ROWS
    result.write_csv(out / "scan.csv")
    report = {"fit_residual": bath.model.residual, "e_max_cm": bath.e_max_cm,
              "config": config.to_dict(), "sweeps": _sweep_reports(result, bath.density)}
    (out / "report.json").write_text(json.dumps(report, indent=2))
    failed = result.failures
    print(f"{len(result.rows) - len(failed)}/{len(result.rows)} rows converged; results in {out}")
    return EXIT_ROWS if failed else EXIT_OK


def cmd_resonances(args) -> int:
    result = ScanResult.read_csv(args.scan)
    data = np.loadtxt(args.spectrum, delimiter=",", skiprows=1, ndmin=2)
    density = SpectralDensity(data[:, 0], data[:, 1])
    sweeps = _sweep_reports(result, density)
    text = json.dumps({"sweeps": sweeps}, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def cmd_oracle(args) -> int:
    try:
        spec = OracleSpec.from_dict(json.loads(Path(args.spec).read_text()))
    except (OSError, json.JSONDecodeError, TypeError, KeyError) as exc:
        raise ValidationError(f"cannot read oracle spec {args.spec}: {exc}") from None
    out = Path(args.out)
    if out.exists() and not args.regenerate:
        print(f"error: {out} exists; pass --regenerate to overwrite the golden file", file=sys.stderr)
        return EXIT_CONFIG
    result = steady_state_exact(spec)
    save_golden(out, spec, result, label=args.label)
    print(json.dumps(result.to_dict(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vibrolase", description="Vibrationally resolved few-emitter lasing.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scan", help="drive-strength sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--workers", type=int, default=0)
    s.set_defaults(func=cmd_scan)

    s = sub.add_parser("fit-bath", help="effective density, correlation function and exponential fit")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_bath)

    s = sub.add_parser("spectrum", help="effective spectral density only")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("oracle", help="exact steady state of a small system, saved as a golden file")
    s.add_argument("--spec", required=True, help="JSON document of oracle parameters")
    s.add_argument("--out", required=True)
    s.add_argument("--label", default="")
    s.add_argument("--regenerate", action="store_true", help="overwrite an existing golden file")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("resonances", help="pair n_cav maxima of a scan with spectral peaks")
    s.add_argument("--scan", required=True)
    s.add_argument("--spectrum", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_resonances)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ParseError, CapacityError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

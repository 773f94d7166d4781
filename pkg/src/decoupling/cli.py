"""
Command-line front end.

::

    decoupling [--config cfg.json] [--seed S] [--out DIR] [--workers K] COMMAND ...

Commands
--------
sequence {udd,cpmg,solve}
    Write a pulse-sequence JSON (``sequence.json``); ``solve`` also writes
    ``solve_report.json`` with the cancellation residuals.
predict
    Filter-function prediction: ``coherence.csv``, ``filter.csv`` and
    ``predict_summary.json`` (1/e time).
simulate
    Monte-Carlo Ramsey scans: ``fringe_XXX.csv`` per tau, ``curve.csv`` and a
    ``curves.json`` manifest that ``fit`` reads directly.
fit
    Spectrum fit over one or more ``curves.json`` manifests:
    ``spectrum_fit.json``, ``spectrum.csv``, ``tau_c.csv`` and
    ``scaling.json``.

Options may also come from a JSON config file, either at top level or in a
section named after the command; command-line flags win. Every run writes
``run_manifest.json`` with the resolved options. Data files never contain
timestamps, so reruns with the same seed are byte-identical for any
``--workers``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dephasing import (CoherenceModel, coherence_curve, coherence_time, filter_function_finite,
                        write_coherence_csv, write_filter_csv)
from .exceptions import ConvergenceError, ValidationError
from .montecarlo import PulseParams, coherence_curve_mc, default_phases
from .noise import load_spectrum
from .sequences import (PulseSequence, cancellation_residual, cpmg_times, load_sequence,
                        make_sequence, solve_polynomial_cancellation, udd_times)
from .spectroscopy import (DEFAULT_OMEGA_RANGE, CoherenceCurve, fit_coherence_time, fit_spectrum,
                           linear_scaling_report)

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

GLOBAL_DEFAULTS = {"seed": 0, "out": ".", "workers": 1}

DEFAULTS = {
    "sequence": {"kind": None, "n": None, "tau": 1e-3, "pulse_duration": 0.0, "guess": "cpmg",
                 "tol": 1e-10},
    "predict": {"sequence": None, "spectrum": None, "taus": None, "tau_grid": None,
                "normalization": 1.0, "x_max": 200.0, "x_points": 2000},
    "simulate": {"sequence": None, "spectrum": None, "taus": None, "tau_grid": None,
                 "shots": 200, "phases_deg": None, "rabi_frequency": 2 * math.pi * 18e3,
                 "phase_mode": "quadrature_y", "readout_error": 0.002, "instantaneous": False,
                 "bootstrap": 500},
    "fit": {"curves": None, "knots": 8, "omega_min": DEFAULT_OMEGA_RANGE[0],
            "omega_max": DEFAULT_OMEGA_RANGE[1], "starts": 8},
}


def _float_list(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from exc


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS,
                        help="worker processes (results do not depend on it)")

    parser = argparse.ArgumentParser(prog="decoupling", parents=[common],
                                     description="Dynamic-decoupling toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("sequence", parents=[common], help="write a pulse sequence")
    p.add_argument("kind", choices=["udd", "cpmg", "solve"])
    p.add_argument("--n", type=int, default=S)
    p.add_argument("--tau", type=float, default=S, help="duration in s")
    p.add_argument("--pulse-duration", dest="pulse_duration", type=float, default=S)
    p.add_argument("--guess", choices=["cpmg", "udd"], default=S,
                   help="starting timings for solve")
    p.add_argument("--tol", type=float, default=S)

    def add_tau_args(q):
        q.add_argument("--sequence", default=S, help="sequence JSON")
        q.add_argument("--spectrum", default=S, help="spectrum JSON")
        q.add_argument("--taus", type=_float_list, default=S, help="comma-separated taus in s")
        q.add_argument("--tau-grid", dest="tau_grid", type=_float_list, default=S,
                       help="MIN,MAX,COUNT geometric grid in s")

    p = sub.add_parser("predict", parents=[common], help="filter-function prediction")
    add_tau_args(p)
    p.add_argument("--normalization", type=float, default=S)
    p.add_argument("--x-max", dest="x_max", type=float, default=S)
    p.add_argument("--x-points", dest="x_points", type=int, default=S)

    p = sub.add_parser("simulate", parents=[common], help="Monte-Carlo Ramsey scans")
    add_tau_args(p)
    p.add_argument("--shots", type=int, default=S, help="shots per phase point")
    p.add_argument("--phases-deg", dest="phases_deg", type=_float_list, default=S)
    p.add_argument("--rabi-frequency", dest="rabi_frequency", type=float, default=S,
                   help="rad/s")
    p.add_argument("--phase-mode", dest="phase_mode", choices=["fixed_x", "quadrature_y"],
                   default=S)
    p.add_argument("--readout-error", dest="readout_error", type=float, default=S)
    p.add_argument("--instantaneous", action="store_true", default=S)
    p.add_argument("--bootstrap", type=int, default=S)

    p = sub.add_parser("fit", parents=[common], help="fit a noise spectrum to curves")
    p.add_argument("--curves", nargs="+", default=S, help="curves.json manifests")
    p.add_argument("--knots", type=int, default=S)
    p.add_argument("--omega-min", dest="omega_min", type=float, default=S)
    p.add_argument("--omega-max", dest="omega_max", type=float, default=S)
    p.add_argument("--starts", type=int, default=S)
    return parser


def _read_json(path):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then config file, then command-line flags."""
    cmd = args.command
    allowed = {**GLOBAL_DEFAULTS, **DEFAULTS[cmd]}
    resolved = dict(allowed)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    if "config" in vars(args):
        cfg = _read_json(args.config)
        if not isinstance(cfg, dict):
            raise ValidationError("config file must hold a JSON object")
        section = cfg.get(cmd, {})
        top = {k: v for k, v in cfg.items() if k not in DEFAULTS}
        for source in (top, section):
            unknown = set(source) - set(allowed)
            if unknown:
                raise ValidationError(f"unknown config keys for {cmd!r}: {sorted(unknown)}")
            resolved.update(source)
    resolved.update(flags)
    if resolved["workers"] < 1:
        raise ValidationError("--workers must be >= 1")
    if resolved["seed"] < 0:
        raise ValidationError("--seed must be >= 0")
    return resolved


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ValidationError(f"missing required option(s): {', '.join(missing)}")


def _taus(cfg):
    if cfg.get("taus") is not None:
        taus = np.asarray(cfg["taus"], dtype=float)
    elif cfg.get("tau_grid") is not None:
        grid = cfg["tau_grid"]
        if len(grid) != 3 or grid[2] < 1 or int(grid[2]) != grid[2]:
            raise ValidationError("tau grid must be MIN,MAX,COUNT")
        taus = np.geomspace(grid[0], grid[1], int(grid[2]))
    else:
        raise ValidationError("give --taus or --tau-grid")
    if taus.size == 0 or np.any(taus <= 0) or np.any(np.diff(taus) <= 0):
        raise ValidationError("taus must be positive and strictly increasing")
    return taus


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_sequence(cfg, out: Path) -> list:
    _require(cfg, "n")
    kind, n = cfg["kind"], cfg["n"]
    if kind == "solve":
        guess = cpmg_times(n) if cfg["guess"] == "cpmg" else udd_times(n)
        alphas = solve_polynomial_cancellation(n, guess, tol=cfg["tol"])
        seq = PulseSequence(alphas=tuple(alphas), tau=cfg["tau"],
                            pulse_duration=cfg["pulse_duration"], label=f"solved-{n}")
        residuals = [float(cancellation_residual(alphas, j)) for j in range(1, n + 1)]
        report = {
            "n": n,
            "guess": cfg["guess"],
            "residuals": residuals,
            "max_abs_residual": max(abs(r) for r in residuals),
            "max_deviation_from_closed_form": max(
                abs(a - b) for a, b in zip(alphas, udd_times(n))),
        }
        _write_json(out / "solve_report.json", report)
        print(f"solved n={n}: max |residual| = {report['max_abs_residual']:.3e}, "
              f"max deviation from closed form = {report['max_deviation_from_closed_form']:.3e}")
        files = ["sequence.json", "solve_report.json"]
    else:
        seq = make_sequence(kind, n, tau=cfg["tau"], pulse_duration=cfg["pulse_duration"])
        print(f"{seq.label}: alphas = {list(seq.alphas)}")
        files = ["sequence.json"]
    seq.to_json(out / "sequence.json")
    return files


def cmd_predict(cfg, out: Path) -> list:
    _require(cfg, "sequence", "spectrum")
    seq = load_sequence(cfg["sequence"])
    spectrum = load_spectrum(cfg["spectrum"])
    taus = _taus(cfg)
    model = CoherenceModel(seq, spectrum, cfg["normalization"])
    contrasts, chis = coherence_curve(model, taus)
    write_coherence_csv(out / "coherence.csv", taus, contrasts, chis)

    xs = np.linspace(0.0, cfg["x_max"], cfg["x_points"])
    write_filter_csv(out / "filter.csv", xs, filter_function_finite(seq, xs))

    try:
        tau_c = coherence_time(model, tau_guess=float(np.median(taus)))
        note = None
    except ConvergenceError as exc:
        tau_c, note = None, str(exc)
    _write_json(out / "predict_summary.json",
                {"label": seq.label, "n": seq.n, "tau_c_s": tau_c, "note": note})
    print(f"{seq.label}: tau_c = {tau_c if tau_c is not None else 'n/a'}")
    return ["coherence.csv", "filter.csv", "predict_summary.json"]


def cmd_simulate(cfg, out: Path) -> list:
    _require(cfg, "sequence", "spectrum")
    seq = load_sequence(cfg["sequence"])
    spectrum = load_spectrum(cfg["spectrum"])
    taus = _taus(cfg)
    params = PulseParams(rabi_frequency=cfg["rabi_frequency"],
                         pi_pulse_phase_mode=cfg["phase_mode"],
                         readout_error=cfg["readout_error"],
                         instantaneous=bool(cfg["instantaneous"]))
    phases = (default_phases() if cfg["phases_deg"] is None
              else np.radians(np.asarray(cfg["phases_deg"], dtype=float)))
    if cfg["shots"] < 1:
        raise ValidationError("--shots must be >= 1")
    curve, fringes = coherence_curve_mc(seq, params, spectrum, taus,
                                        shots_per_phase=cfg["shots"], seed=cfg["seed"],
                                        phases=phases, n_bootstrap=cfg["bootstrap"],
                                        workers=cfg["workers"], return_fringes=True)
    files = []
    for i, fr in enumerate(fringes):
        name = f"fringe_{i:03d}.csv"
        fr.to_csv(out / name)
        files.append(name)
    curve.to_csv(out / "curve.csv")
    _write_json(out / "curves.json",
                {"curves": [{"file": "curve.csv", "sequence": seq.to_dict(),
                             "fringes": files, "source": "simulated"}]})
    print(f"{seq.label}: simulated {taus.size} taus x {phases.size} phases x {cfg['shots']} shots")
    return files + ["curve.csv", "curves.json"]


def _load_curves(manifests):
    curves = []
    for path in manifests:
        path = Path(path)
        payload = _read_json(path)
        try:
            entries = payload["curves"]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path} has no 'curves' list") from exc
        for entry in entries:
            seq = PulseSequence.from_dict(entry["sequence"])
            curve = CoherenceCurve.from_csv(path.parent / entry["file"], seq,
                                            source=entry.get("source", "ingested"))
            curves.append(curve)
    return curves


def cmd_fit(cfg, out: Path) -> list:
    _require(cfg, "curves")
    manifests = cfg["curves"] if isinstance(cfg["curves"], list) else [cfg["curves"]]
    curves = _load_curves(manifests)
    fit = fit_spectrum(curves, knots=cfg["knots"], omega_range=(cfg["omega_min"],
                       cfg["omega_max"]), seed=cfg["seed"], n_starts=cfg["starts"],
                       workers=cfg["workers"])
    fit.write_json(out / "spectrum_fit.json")
    fit.write_spectrum_csv(out / "spectrum.csv")

    points = []
    with open(out / "tau_c.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "n", "tau_c_s", "tau_c_err_s"])
        for c in curves:
            try:
                tc, err = fit_coherence_time(c)
            except ConvergenceError:
                w.writerow([c.label, c.n, "", ""])
                continue
            w.writerow([c.label, c.n, repr(tc), repr(err)])
            points.append((c.n, tc, err))
    if len(points) >= 3:
        slope, intercept, r2 = linear_scaling_report(points)
        scaling = {"slope_s_per_pulse": slope, "intercept_s": intercept, "r_squared": r2,
                   "points": len(points)}
    else:
        scaling = {"slope_s_per_pulse": None, "intercept_s": None, "r_squared": None,
                   "points": len(points), "note": "need at least 3 fitted tau_c values"}
    _write_json(out / "scaling.json", scaling)
    print(f"fit {len(curves)} curves: residual {fit.residual:.4g} on {fit.dof} dof, "
          f"mid-band slope {fit.slope():.3f}")
    return ["spectrum_fit.json", "spectrum.csv", "tau_c.csv", "scaling.json"]


COMMANDS = {"sequence": cmd_sequence, "predict": cmd_predict, "simulate": cmd_simulate,
            "fit": cmd_fit}


def run(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    cfg = resolve_config(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    files = COMMANDS[args.command](cfg, out)
    _write_json(out / "run_manifest.json", {
        "command": args.command,
        "version": __version__,
        "seed": cfg["seed"],
        "config": cfg,
        "outputs": files,
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    })
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ConvergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

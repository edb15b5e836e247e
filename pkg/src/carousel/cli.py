"""
Command-line interface.

::

    carousel solve --dist '{"type":"erlang_mixture","mu":4.0,"alpha":[0,1]}'
    carousel sweep --out sweep.csv
    carousel fit --mean 0.5 --scv 2.0
    carousel simulate --dist dist.json --steps 1000000 --seed 7 --format csv

Exit codes: 0 success, 1 input error, 2 solver error. Errors are reported
as one JSON object on stderr. Log verbosity comes from ``CAROUSEL_LOG``
(``error``, ``warn``, ``info`` or ``debug``).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Optional

import numpy as np

from carousel import analytic, oracles, phasetype
from carousel.errors import CarouselError, SolverError
from carousel.phasetype import ErlangMixture, MomentSummary

log = logging.getLogger("carousel")

METHODS = ("auto", "analytic", "grid", "simulation")
EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2
MONOTONE_TOL = 1e-6
MASS_TOL = 1e-7
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


class InputError(CarouselError, ValueError):
    """Bad command-line input."""


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class SweepSpec:
    means: tuple = (0.25, 0.5, 1.0)
    scv_lo: float = 0.25
    scv_hi: float = 2.0
    scv_step: float = 0.25
    method: str = "auto"
    out: Optional[str] = None

    def __post_init__(self):
        if not self.means or any(not (m > 0 and math.isfinite(m)) for m in self.means):
            raise InputError("means must be positive")
        if not self.scv_lo > 0:
            raise InputError("scv range must start above 0")
        if not self.scv_step > 0:
            raise InputError("scv step must be positive")
        if self.scv_hi < self.scv_lo:
            raise InputError("scv range is empty")
        if self.method not in METHODS:
            raise InputError(f"unknown method {self.method!r}")

    def scv_values(self) -> np.ndarray:
        n = int(math.floor((self.scv_hi - self.scv_lo) / self.scv_step + 1e-9)) + 1
        # rounding keeps grid points such as 1.0 exact
        return np.round(self.scv_lo + self.scv_step * np.arange(n), 12)


@dataclass
class RunReport:
    """Everything needed to reproduce and audit one CLI run."""
    command: list
    config: dict
    results: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    version: str = field(default_factory=_version)
    seeds: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(analytic._jsonable(asdict(self)), indent=2)


# -- helpers ----------------------------------------------------------------

def parse_dist(spec: str) -> phasetype.PickTimeDistribution:
    """A JSON literal, or the path of a file holding one."""
    text = spec.strip()
    if not text.startswith("{"):
        path = Path(spec)
        if not path.is_file():
            raise InputError(f"--dist is neither a JSON object nor a readable file: {spec!r}")
        text = path.read_text()
    return phasetype.loads(text)


def family(dist) -> str:
    return "erlang_mixture" if isinstance(dist, ErlangMixture) else "hyperexponential"


def resolve_method(dist, method: str) -> str:
    if method == "auto":
        return "analytic" if isinstance(dist, ErlangMixture) else "grid"
    return method


def run_method(dist, method: str, *, grid_size: int = 10_000, steps: int = 10**6,
               seed: int = 0):
    """Dispatch to the analytic solver or one of the oracles."""
    method = resolve_method(dist, method)
    if method == "analytic":
        return analytic.solve(dist)
    if method == "grid":
        return oracles.grid_solve(dist, grid_size)
    if method == "simulation":
        return oracles.simulate(dist, steps, seed=seed)
    raise InputError(f"unknown method {method!r}")


def mass_defect(result) -> float:
    """``|pi0 + int f - 1|`` as seen by the method that produced ``result``."""
    if isinstance(result, analytic.StationarySolution):
        return float(result.diagnostics.get("normalization_error", math.nan))
    if isinstance(result, oracles.GridSolution):
        return abs(result.pi0 + result.mass - 1.0)
    return abs(result.pi0 + float(result.histogram.sum()) - 1.0)


def summary(result) -> dict:
    out = {"method": result.method, "pi0": result.pi0, "ew": result.ew, "tau": result.tau}
    for key in ("pi0_se", "ew_se", "tau_se"):
        if hasattr(result, key):
            out[key] = getattr(result, key)
    return out


def _emit(text: str, out: Optional[str]):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- commands ---------------------------------------------------------------

def cmd_solve(args) -> RunReport:
    dist = parse_dist(args.dist)
    report = RunReport(sys.argv[1:] if args.argv is None else args.argv,
                       {"dist": dist.to_json_dict(), "method": args.method,
                        "grid_size": args.grid_size, "steps": args.steps, "seed": args.seed},
                       seeds=[args.seed])
    t0 = time.perf_counter()
    result = run_method(dist, args.method, grid_size=args.grid_size,
                        steps=args.steps, seed=args.seed)
    report.timings["solve"] = time.perf_counter() - t0
    report.results.append(summary(result) | {"dist": family(dist)})
    if args.format == "csv":
        if isinstance(result, oracles.SimulationEstimate):
            _emit(oracles.histogram_csv(result), args.out)
        elif isinstance(result, oracles.GridSolution):
            _emit("x,f\n" + "".join(f"{a:.6f},{b:.12e}\n" for a, b in zip(result.x, result.f)),
                  args.out)
        else:
            _emit(analytic.density_csv(result), args.out)
    else:
        report.results[-1]["detail"] = result.to_json_dict()
        _emit(report.to_json() + "\n", args.out)
    return report


def sweep(spec: SweepSpec, *, seed: int = 0, grid_size: int = 10_000,
          steps: int = 10**6) -> tuple:
    """
    Throughput over a (mean, scv) grid of fitted pick-time laws.

    Returns the CSV text and the `RunReport`. Failed points are recorded
    in the report and skipped in the CSV.
    """
    scvs = spec.scv_values()
    points = [(m, c) for m in spec.means for c in scvs]
    children = np.random.SeedSequence(seed).spawn(len(points))
    point_seeds = [int(ch.generate_state(1)[0]) for ch in children]
    report = RunReport(["sweep"], asdict(spec) | {"seed": seed, "grid_size": grid_size,
                                                  "steps": steps},
                       seeds=point_seeds)
    rows = []
    t0 = time.perf_counter()
    for (mean, scv), s in zip(points, point_seeds):
        try:
            dist = phasetype.fit(MomentSummary(float(mean), float(scv)))
            result = run_method(dist, spec.method, grid_size=grid_size, steps=steps, seed=s)
        except CarouselError as exc:
            log.warning("sweep point ep=%g scv=%g failed: %s", mean, scv, exc)
            report.warnings.append({"ep": mean, "scv": scv, "error": str(exc)})
            continue
        defect = mass_defect(result)
        if not defect <= MASS_TOL:
            msg = f"pi0 + int f deviates from 1 by {defect:.3g} at ep={mean:g}, scv={scv:g}"
            log.warning(msg)
            report.warnings.append({"ep": mean, "scv": scv, "warning": msg})
        tag = f"{family(dist)}:{result.method}"
        rows.append({"ep": float(mean), "scv": float(scv), "tau": result.tau,
                     "pi0": result.pi0, "ew": result.ew, "method": tag})
    report.timings["sweep"] = time.perf_counter() - t0
    report.results = rows

    spreads = {}
    for mean in spec.means:
        taus = [r["tau"] for r in rows if r["ep"] == mean]
        for (a, b) in zip(rows, rows[1:]):
            if a["ep"] == b["ep"] == mean and b["tau"] > a["tau"] + MONOTONE_TOL:
                msg = (f"tau increases with scv at ep={mean:g}: "
                       f"{a['tau']:.10g} (scv {a['scv']:g}) -> {b['tau']:.10g} (scv {b['scv']:g})")
                log.warning(msg)
                report.warnings.append({"ep": mean, "warning": msg})
        if taus:
            spreads[float(mean)] = (max(taus) - min(taus)) / max(taus)
            log.info("relative tau spread over scv at ep=%g: %.6g", mean, spreads[float(mean)])
    report.config["relative_spread"] = spreads

    lines = ["ep,scv,tau,pi0,ew,method"]
    lines += [f"{r['ep']:g},{r['scv']:g},{r['tau']:.12g},{r['pi0']:.12g},{r['ew']:.12g},{r['method']}"
              for r in rows]
    return "\n".join(lines) + "\n", report


def cmd_sweep(args) -> RunReport:
    spec = SweepSpec(tuple(args.means), args.scv_lo, args.scv_hi, args.scv_step,
                     args.method, args.out)
    text, report = sweep(spec, seed=args.seed, grid_size=args.grid_size, steps=args.steps)
    report.command = sys.argv[1:] if args.argv is None else args.argv
    _emit(text if args.format == "csv" else report.to_json() + "\n", args.out)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    return report


def cmd_fit(args) -> RunReport:
    target = MomentSummary(args.mean, args.scv)
    fitter = {"auto": phasetype.fit, "erlang": phasetype.fit_mixed_erlang,
              "hyperexponential": phasetype.fit_hyperexponential}[args.family]
    dist = fitter(target)
    got = dist.moments()
    row = {"distribution": dist.to_json_dict(),
           "target": {"mean": target.mean, "scv": target.scv},
           "achieved": {"mean": got.mean, "scv": got.scv},
           "relative_error": max(abs(got.mean / target.mean - 1), abs(got.scv / target.scv - 1))}
    report = RunReport(sys.argv[1:] if args.argv is None else args.argv,
                       {"mean": args.mean, "scv": args.scv, "family": args.family}, [row])
    if args.format == "csv":
        _emit("mean,scv,fit_mean,fit_scv,distribution\n"
              f"{target.mean:g},{target.scv:g},{got.mean:.15g},{got.scv:.15g},"
              f"\"{phasetype.dumps(dist).replace(chr(34), chr(34) * 2)}\"\n", args.out)
    else:
        _emit(json.dumps(row, indent=2) + "\n", args.out)
    return report


def cmd_simulate(args) -> RunReport:
    dist = parse_dist(args.dist)
    report = RunReport(sys.argv[1:] if args.argv is None else args.argv,
                       {"dist": dist.to_json_dict(), "steps": args.steps,
                        "burn_in": args.burn_in, "seed": args.seed}, seeds=[args.seed])
    t0 = time.perf_counter()
    est = oracles.simulate(dist, args.steps, args.burn_in, args.seed)
    report.timings["simulate"] = time.perf_counter() - t0
    report.results.append(summary(est) | {"dist": family(dist)})
    if args.format == "csv":
        _emit(oracles.histogram_csv(est), args.out)
    else:
        report.results[-1]["detail"] = est.to_json_dict()
        _emit(report.to_json() + "\n", args.out)
    return report


# -- argument parsing -------------------------------------------------------

def _positive_int(text: str) -> int:
    try:
        value = int(float(text)) if "e" in text.lower() else int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return value


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="carousel", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=_version())
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, fmt):
        p.add_argument("--out", help="output file (default stdout)")
        p.add_argument("--format", choices=("csv", "json"), default=fmt)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("solve", help="stationary solution for one distribution")
    p.add_argument("--dist", required=True, help="JSON literal or path to a JSON file")
    p.add_argument("--method", choices=METHODS, default="auto")
    p.add_argument("--grid-size", type=_positive_int, default=10_000)
    p.add_argument("--steps", type=_positive_int, default=10**6)
    common(p, "json")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="throughput against scv for fitted laws")
    p.add_argument("--means", type=float, nargs="+", default=[0.25, 0.5, 1.0])
    p.add_argument("--scv-lo", type=float, default=0.25)
    p.add_argument("--scv-hi", type=float, default=2.0)
    p.add_argument("--scv-step", type=float, default=0.25)
    p.add_argument("--method", choices=METHODS, default="auto")
    p.add_argument("--grid-size", type=_positive_int, default=10_000)
    p.add_argument("--steps", type=_positive_int, default=10**6)
    p.add_argument("--report", help="also write the JSON run report here")
    common(p, "csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit", help="two-moment fit of a pick-time law")
    p.add_argument("--mean", type=float, required=True)
    p.add_argument("--scv", type=float, required=True)
    p.add_argument("--family", choices=("auto", "erlang", "hyperexponential"), default="auto")
    common(p, "json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="Monte Carlo run of the waiting-time recursion")
    p.add_argument("--dist", required=True, help="JSON literal or path to a JSON file")
    p.add_argument("--steps", type=_positive_int, default=10**6)
    p.add_argument("--burn-in", type=_positive_int, default=oracles.DEFAULT_BURN_IN)
    common(p, "json")
    p.set_defaults(func=cmd_simulate)
    return parser


def _configure_logging():
    level = os.environ.get("CAROUSEL_LOG", "warn").lower()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("carousel")
    root.handlers[:] = [handler]
    root.setLevel(LOG_LEVELS.get(level, logging.WARNING))
    root.propagate = False


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                 "exit_code": code}) + "\n")
    return code


def main(argv: Optional[list] = None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
        args.argv = list(argv) if argv is not None else None
        args.func(args)
    except SolverError as exc:
        return _fail(EXIT_SOLVER, exc)
    except (CarouselError, ValueError, OSError) as exc:
        return _fail(EXIT_INPUT, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""``lmmpf`` command line: ``gen``, ``run``, ``bench`` and ``report``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench as B
from .backends import default_workers
from .errors import ConfigError, LmmpfError, NumericalError
from .lmm import INTEGRATOR_NAMES

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("lmmpf")


def _floats(text):
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _common(p: argparse.ArgumentParser):
    p.add_argument("--problem", choices=B.PROBLEMS, default="metabolic")
    p.add_argument("--n", type=int, default=10, help="advection-diffusion grid parameter")
    p.add_argument("--seed", type=int, default=42)


def _experiment(p: argparse.ArgumentParser):
    p.add_argument("--data", required=True, help="observation CSV written by `gen`")
    p.add_argument("--integrator", choices=INTEGRATOR_NAMES, default="bdf2")
    p.add_argument("--backend", choices=("seq", "par", "batch"), default="seq")
    p.add_argument("--workers", type=int, default=None, help="default: $PFSMC_WORKERS or 2")
    p.add_argument("--particles", type=int, default=1000)
    p.add_argument("--step", type=float, default=None, help="fixed step h (problem default if omitted)")
    p.add_argument("--shrink-a", type=float, default=0.98)
    p.add_argument("--rtol", type=float, default=1e-3, help="adaptive integrator tolerance")
    p.add_argument("--prior-mean", type=_floats, default=None)
    p.add_argument("--prior-std", type=_floats, default=None)
    p.add_argument("--warmup", action="store_true", help="run one untimed step first")
    p.add_argument("--out", default="out")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lmmpf", description="Particle filter parameter estimation for stiff ODEs")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic observations")
    _common(g)
    g.add_argument("--out", required=True, help="observation CSV path")
    g.add_argument("--sigma", type=float, default=None, help="override the noise level")
    g.add_argument("--truth", type=_floats, default=None, help="override the true parameters")
    g.add_argument("--rtol", type=float, default=B.DATA_RTOL)

    r = sub.add_parser("run", help="run the filter once and write trace and report")
    _common(r)
    _experiment(r)

    b = sub.add_parser("bench", help="integrator x backend sweep with speedup table")
    _common(b)
    _experiment(b)
    b.add_argument("--integrators", default="bdf2", help="comma-separated integrator ids")
    b.add_argument("--backends", default="seq,par,batch", help="comma-separated backends")

    rp = sub.add_parser("report", help="tables and plots from report JSON files")
    rp.add_argument("reports", nargs="*", help="report files (default: every report_*.json in --out)")
    rp.add_argument("--out", default="out")
    return ap


def _config(args) -> B.ExperimentConfig:
    workers = args.workers if args.workers is not None else default_workers()
    return B.ExperimentConfig(
        problem=args.problem, n=args.n, integrator=args.integrator, backend=args.backend,
        workers=workers, N=args.particles, h=args.step, a=args.shrink_a, seed=args.seed,
        rtol=args.rtol, data=args.data, out=args.out, warmup=args.warmup,
        prior_mean=args.prior_mean, prior_std=args.prior_std,
    )


def _summary_line(rep) -> str:
    est = ", ".join(f"{n}={m:.4g}+-{s:.2g}" for n, m, s in
                    zip(rep["param_names"], rep["final_mean"], rep["final_std"]))
    return f"{B.ExperimentConfig(**rep['config']).label}: {rep['wall_time_s']:.3f}s  {est}"


def cmd_gen(args):
    prob = B.make_problem(args.problem, args.n, args.truth, args.seed)
    ds = B.generate_data(prob, args.seed, args.out, sigma=args.sigma, rtol=args.rtol)
    print(f"wrote {args.out} ({ds.Y.shape[0]} rows x {ds.Y.shape[1]} observations, sigma={ds.sigma:.6g})")


def cmd_run(args):
    rep = B.run_experiment(_config(args))
    print(_summary_line(rep))
    print(f"trace: {rep['trace_path']}")


def cmd_bench(args):
    base = _config(args)
    integs = [s.strip() for s in args.integrators.split(",") if s.strip()]
    bad = [i for i in integs if i not in INTEGRATOR_NAMES]
    if bad:
        raise ConfigError(f"unknown integrators {bad}")
    backends = [s.strip() for s in args.backends.split(",") if s.strip()]
    ds = B.load_data(args.data)
    reports = B.bench(base, integs, backends, workers=base.workers if args.workers is not None
                      else default_workers(), ds=ds)
    for rep in reports:
        extra = ""
        if rep["speedup"] is not None:
            extra = f"  S={rep['speedup']:.3g}"
            if rep["efficiency"] is not None:
                extra += f" E={rep['efficiency']:.3g}"
        print(_summary_line(rep) + extra)
    B.emit_report(reports, args.out)
    print((Path(args.out) / "speedup_table.txt").read_text(), end="")


def cmd_report(args):
    paths = [Path(p) for p in args.reports] or sorted(Path(args.out).glob("report_*.json"))
    if not paths:
        raise ConfigError(f"no reports found in {args.out}")
    reports = [B.load_report(p) for p in paths]
    B.emit_report(reports, args.out)
    print((Path(args.out) / "speedup_table.txt").read_text(), end="")


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "bench": cmd_bench, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except LmmpfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Exit codes: 0 success, 1 divergence in a run that was expected to converge,
2 configuration or usage error, 3 state is not a fixed point (``classify``).
"""

from __future__ import annotations

import argparse
import os
import sys

from . import __version__
from . import harness as hn
from . import problems as pb
from . import stability as st
from .numkit import read_matrices, read_matrix

EXIT_OK = 0
EXIT_DIVERGED = 1
EXIT_CONFIG = 2
EXIT_NOT_FIXED = 3


def _scenario_blurb(sid: str) -> str:
    cfg = hn.builtin_scenario(sid)
    if cfg.kind == "orbits":
        return f"periodic-orbit scan, mu={cfg.mu:g}, h={max(cfg.h_values):g}"
    if cfg.kind == "modified":
        return "GD vs first-order modified equation"
    if cfg.h_rule == "explicit":
        hs = ", ".join(f"{h:.6g}" for h in sorted(cfg.h_values, reverse=True))
        rule = f"h = {hs}"
    else:
        rule = f"{cfg.h_rule} x {len(cfg.fractions)} fractions"
    if cfg.init_x is not None:
        start = f"start x={cfg.init_x} y={cfg.init_y}"
    else:
        start = f"norms=({cfg.norm_x:g}, {cfg.norm_y:g})"
    return f"{cfg.family} n={cfg.n} d={cfg.d} {start}, {rule}"


def _add_run_args(sp: argparse.ArgumentParser) -> None:
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", help="builtin scenario id (see 'scenarios')")
    src.add_argument("--config", help="path to a key = value config file")
    sp.add_argument("--out", required=True, help="output directory; files go to OUT/<scenario>/")
    sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config key (repeatable)")
    sp.add_argument("--workers", type=int, default=None, help="parallel runs within a sweep")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gdbalance",
        description="GD dynamics for matrix factorization at large learning rates.",
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("run", help="run a scenario or config file")
    _add_run_args(sp)

    sp = sub.add_parser("sweep", help="learning-rate sweep with optional rate overrides")
    _add_run_args(sp)
    sp.add_argument("--fractions", help="comma list of fractions of the base rate, e.g. 1,6/7,5/7")
    sp.add_argument("--h-values", help="comma list of explicit learning rates")

    sp = sub.add_parser("classify", help="classify a fixed point of the GD map")
    sp.add_argument("--problem", required=True, help="matrix file holding the square target A")
    sp.add_argument("--state", required=True, help="matrix file holding X then Y (n x d each)")
    sp.add_argument("--h", type=float, required=True, help="learning rate")
    sp.add_argument("--tol", type=float, default=1e-8, help="marginal band around modulus 1")

    sp = sub.add_parser("orbits", help="scan for periodic orbits of the d=1 scalar problem")
    sp.add_argument("--mu", type=float, default=1.0)
    sp.add_argument("--h", type=float, default=1.9)
    sp.add_argument("--scans", type=int, default=500)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--periods", default="2,3,4", help="comma list of periods to try")
    sp.add_argument("--out", help="also write OUT/orbits.csv")

    sub.add_parser("scenarios", help="list builtin scenario ids")
    return ap


def _err(msg: str) -> None:
    print(f"gdbalance: error: {msg}", file=sys.stderr)


def _load_run_config(args) -> hn.ExperimentConfig:
    cfg = hn.builtin_scenario(args.scenario) if args.scenario else hn.load_config(args.config)
    pairs = list(args.overrides)
    if getattr(args, "fractions", None):
        pairs.append(f"fractions={args.fractions}")
    if getattr(args, "h_values", None):
        pairs += [f"h_values={args.h_values}", "h_rule=explicit"]
    if args.workers is not None:
        pairs.append(f"workers={args.workers}")
    return hn.apply_overrides(cfg, pairs)


def cmd_run(args, sweep_only: bool = False) -> int:
    try:
        cfg = _load_run_config(args)
        if sweep_only and cfg.kind != "sweep":
            raise hn.ConfigError(f"scenario {cfg.scenario!r} is not a learning-rate sweep")
        res = hn.run_experiment(cfg, args.out)
    except (hn.ConfigError, ValueError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except OSError as exc:
        _err(f"I/O failure: {exc}")
        return EXIT_CONFIG
    if res.summary is not None:
        for r in res.summary.rows:
            print(f"h={r.h:.6g}  {r.outcome}  iters={r.outcome.iters}  gap_fro={r.final_gap_fro:.6g}")
    elif cfg.kind == "orbits":
        print(f"{len(res.orbits)} orbits")
    else:
        for t, name in zip(res.trajectories, ("gd", "modified")):
            print(f"{name}: {t.outcome}  |x|={t.last.fro_x:.6g}  |y|={t.last.fro_y:.6g}")
    for f in res.files:
        print(f"wrote {f}")
    if res.unexpected_divergence():
        _err("a run diverged although convergence was expected")
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_classify(args) -> int:
    try:
        A = read_matrix(args.problem)
        mats = read_matrices(args.state)
        if len(mats) != 2:
            raise ValueError("state file must hold exactly two matrices (X then Y)")
        s = pb.FactorState(mats[0], mats[1])
        p = pb.GeneralFactorization(A, s.shape[1])
        if s.shape[0] != p.n:
            raise ValueError("state rows must match the size of A")
        if not args.h > 0:
            raise ValueError("h must be positive")
    except (OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    try:
        rep = st.classify_fixed_point(p, s, args.h, args.tol)
    except st.NotAFixedPoint as exc:
        _err(str(exc))
        return EXIT_NOT_FIXED
    print(st.REPORT_HEADER)
    print(rep.csv_row())
    return EXIT_OK


def cmd_orbits(args) -> int:
    try:
        periods = tuple(int(t) for t in args.periods.split(","))
        if any(not 1 <= q <= 8 for q in periods):
            raise ValueError("periods must lie in [1, 8]")
        if not args.mu > 0 or not args.h > 0 or args.scans < 1:
            raise ValueError("need mu > 0, h > 0 and scans >= 1")
        orbits = hn.orbit_scan(args.mu, args.h, args.scans, args.seed, periods)
    except ValueError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    print("period,residual,x,y")
    for o in orbits:
        print(f"{o.period},{o.residual!r},{float(o.point[0])!r},{float(o.point[1])!r}")
    if args.out:
        try:
            os.makedirs(args.out, exist_ok=True)
            hn.write_orbits(os.path.join(args.out, "orbits.csv"), orbits)
        except OSError as exc:
            _err(f"I/O failure: {exc}")
            return EXIT_CONFIG
    return EXIT_OK


def cmd_scenarios(args) -> int:
    for sid in hn.BUILTIN_SCENARIOS:
        print(f"{sid:22s} {_scenario_blurb(sid)}")
    return EXIT_OK


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "sweep":
        return cmd_run(args, sweep_only=True)
    if args.command == "classify":
        return cmd_classify(args)
    if args.command == "orbits":
        return cmd_orbits(args)
    return cmd_scenarios(args)


if __name__ == "__main__":
    sys.exit(main())

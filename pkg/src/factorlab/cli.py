"""``factorlab`` command line.

Exit codes: 0 success, 1 a verification check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError, TrainConfig, parse_config
from .datagen import save_lambda_csv
from .estimators import (
    DEFAULT_OMEGA,
    candidate_pool,
    candidate_report,
    histogram_estimate,
    select_factorization,
    total_variation,
)
from .factorization import EnumerationOverflow, InvalidConfiguration, complexity_of
from .harness import (
    ISOFLOP_HEADER,
    aggregate,
    final_rows,
    ground_truth_for_seed,
    isoflop_sweep,
    read_csv,
    sample_rng,
    run_experiment,
    write_metrics_csv,
    write_table_csv,
)
from .plot import PlotError, plot_csv
from .theory import run_verification

SMALL_SCALE_MAX_N = 256
SEED_ENV = "FACTORLAB_SEED"


class UsageError(Exception):
    pass


def _load_config(args) -> TrainConfig:
    cfg = parse_config(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "regime", None) and args.regime != cfg.regime:
        cfg = cfg.replace(regime=args.regime)
    if getattr(args, "seeds", None):
        cfg = cfg.replace(seeds=list(args.seeds))
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg = cfg.replace(master_seed=int(env))
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return cfg


def cmd_complexity(args) -> int:
    cfg = _load_config(args)
    gt = ground_truth_for_seed(cfg, cfg.seeds[0])
    rep = complexity_of(gt.factorization)
    print(json.dumps({
        "ac": rep.ac_value,
        "sc": rep.sc_value,
        "parent_cardinalities": list(rep.parent_cardinalities),
        "factorization": gt.factorization.to_dict(),
    }, sort_keys=True))
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    gt = ground_truth_for_seed(cfg, cfg.seeds[0])
    gt.save(args.out, config=cfg.to_dict())
    if args.lambda_csv:
        save_lambda_csv(gt, args.lambda_csv)
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    rows = run_experiment(cfg, workers=args.workers)
    write_metrics_csv(rows, args.out, cfg)
    for r in final_rows(rows):
        print(f"{r.run_id} epoch={r.epoch} loss_population={r.loss_population!r}"
              + (f" loss_unobserved={r.loss_unobserved!r}" if r.loss_unobserved is not None else ""))
    return 0


def cmd_sweep(args) -> int:
    if not args.isoflop:
        raise UsageError("only --isoflop sweeps are available")
    cfg = _load_config(args)
    if cfg.regime != "generalization":
        cfg = cfg.replace(regime="generalization")
    rows = isoflop_sweep(cfg, [int(float(b)) for b in args.budgets], args.gammas)
    write_table_csv(rows, args.out, ISOFLOP_HEADER)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_estimate(args) -> int:
    cfg = _load_config(args)
    gt = ground_truth_for_seed(cfg, cfg.seeds[0])
    N, M = gt.n_inputs, gt.n_outputs
    omega = args.omega if args.omega == "auto" else float(args.omega)
    if omega != "auto" and not omega > 0:
        raise UsageError("--omega must be > 0 or 'auto'")
    try:
        pool = candidate_pool(N, M, args.mode, args.allow_big)
    except EnumerationOverflow as exc:
        raise UsageError(str(exc)) from None
    xs, ys = gt.sample_pairs(args.n, sample_rng(cfg, cfg.seeds[0]))
    emp = histogram_estimate((xs, ys), N, M)
    f, est = select_factorization(emp, omega, pool, N, M)
    truth = gt.joint_matrix()
    if args.out:
        rows = candidate_report(emp, omega, pool, truth)
        write_table_csv(rows, args.out, ("candidate", "factorization", "feasibility_tv", "score",
                                         "feasible", "tv_to_truth"))
    print(json.dumps({
        "selected": f.to_dict(),
        "tv_selected": total_variation(est.joint_matrix(), truth),
        "tv_histogram": total_variation(emp.joint_matrix(), truth),
        "candidates": len(pool),
    }, sort_keys=True))
    return 0


def cmd_verify_theory(args) -> int:
    if args.max_n > SMALL_SCALE_MAX_N and not args.allow_big:
        raise UsageError(f"--max-n {args.max_n} exceeds {SMALL_SCALE_MAX_N}; pass --allow-big to run it")
    results = run_verification(args.configs, args.max_n, args.seed, args.inject_fault)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(r.name for r in failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_plot(args) -> int:
    plot_csv(args.csv, args.x, args.y, args.out, group=args.group,
             logx=args.loglog or args.logx, logy=args.loglog or args.logy, title=args.title)
    print(f"wrote {args.out}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.csv:
        rows.extend(read_csv(path))
    if not rows:
        raise UsageError("no rows to aggregate")
    for col in list(args.group_by) + [args.value]:
        if col not in rows[0]:
            raise UsageError(f"missing column '{col}'")
    if args.final and "run_id" in rows[0]:
        last = {}
        for r in rows:
            last[r["run_id"]] = r
        rows = list(last.values())
    summary = aggregate(rows, args.group_by, args.value)
    header = tuple(args.group_by) + ("count", "mean", "median", "q10", "q90")
    if args.out:
        write_table_csv(summary, args.out, header)
    else:
        print(",".join(header))
        for s in summary:
            print(",".join("" if s[k] is None else repr(s[k]) if isinstance(s[k], float) else str(s[k])
                           for k in header))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="factorlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, seeds=True):
        sp.add_argument("--config", help="JSON config (missing fields take defaults)")
        if seeds:
            sp.add_argument("--seeds", type=int, nargs="+", help="override the config's seed list")

    sp = sub.add_parser("complexity", help="complexity values of the generating factorization")
    with_config(sp)
    sp.set_defaults(func=cmd_complexity)

    sp = sub.add_parser("gen-data", help="sample a ground truth and save it as JSON")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--lambda-csv", help="also write the M x N log-likelihood matrix")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="run one regime for every seed, write metrics CSV")
    with_config(sp)
    sp.add_argument("--regime", choices=("single_pass", "compression", "generalization"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int, default=1, help="threads across seeds")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="isoflop sweep over budgets and observed fractions")
    with_config(sp)
    sp.add_argument("--isoflop", action="store_true", required=True)
    sp.add_argument("--budgets", nargs="+", required=True, help="FLOP budgets, e.g. 1e9 2e9")
    sp.add_argument("--gammas", type=float, nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("estimate", help="histogram vs factorization-selection estimator")
    with_config(sp)
    sp.add_argument("--omega", default=str(DEFAULT_OMEGA), help="feasibility radius, or 'auto'")
    sp.add_argument("--n", type=int, default=1000, help="number of samples")
    sp.add_argument("--mode", choices=("full", "known"), default="full")
    sp.add_argument("--allow-big", action="store_true")
    sp.add_argument("--out", help="per-candidate report CSV")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("verify-theory", help="exactness checks of the algebraic constructions")
    sp.add_argument("--max-n", type=int, default=SMALL_SCALE_MAX_N)
    sp.add_argument("--allow-big", action="store_true")
    sp.add_argument("--configs", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--inject-fault", choices=("table",), help="corrupt a table to exercise failure")
    sp.set_defaults(func=cmd_verify_theory)

    sp = sub.add_parser("plot", help="SVG line chart from metric CSVs")
    sp.add_argument("--csv", nargs="+", required=True)
    sp.add_argument("--x", default="epoch")
    sp.add_argument("--y", default="loss_population")
    sp.add_argument("--group", help="column whose values define the lines")
    sp.add_argument("--logx", action="store_true")
    sp.add_argument("--logy", action="store_true")
    sp.add_argument("--loglog", action="store_true")
    sp.add_argument("--title", default="")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("report", help="group-by summary (mean, median, q10, q90) of CSV columns")
    sp.add_argument("--csv", nargs="+", required=True)
    sp.add_argument("--group-by", nargs="*", default=[])
    sp.add_argument("--value", default="loss_population")
    sp.add_argument("--final", action="store_true", help="only the last row of each run_id")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, InvalidConfiguration, PlotError, FileNotFoundError) as exc:
        print(f"factorlab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line entry point: ``proxyfda <subcommand>``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


from .dumps import DumpFormatError, read_dump, write_csv, write_dump
from .graph import ConfigError


def _experiment(args):
    from .harness.config import ExperimentConfig, apply_overrides, load_config
    exp = load_config(args.config) if args.config else ExperimentConfig()
    if args.set:
        exp = apply_overrides(exp, args.set)
    return exp


def cmd_gen(args) -> int:
    from .harness.world import generate_world
    exp = _experiment(args)
    world = generate_world(exp.world, exp.world_seed if args.world_seed is None else args.world_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, splits in world.datasets.items():
        for split, fs in splits.items():
            if args.format == "csv":
                write_csv(out / f"{name}_{split}.csv", fs)
            else:
                write_dump(out / f"{name}_{split}.fdaf", fs)
    print(f"wrote {sum(len(s) for s in world.datasets.values())} files to {out}")
    return 0


def cmd_finetune(args) -> int:
    from .harness.train import finetune
    from .harness.world import generate_world
    exp = _experiment(args)
    world = generate_world(exp.world, exp.world_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.method}_seed{args.seed}"
    report = finetune(world, exp.run_config(args.method), args.seed, checkpoint=out / f"{stem}.npz")
    report.write_jsonl(out / f"{stem}.jsonl")
    if report.status != "ok":
        print(f"run diverged: {report.records[-1]['error']}", file=sys.stderr)
        return 1
    print(json.dumps(report.summary, sort_keys=True))
    return 0


def cmd_probe(args) -> int:
    from .harness.probe import ProbeConfig, linear_probe
    head, acc = linear_probe(read_dump(args.train), read_dump(args.test),
                             ProbeConfig(args.l2, args.tol, args.epochs, args.seed))
    print(f"A_LP = {acc:.6f}  (epochs {head.epochs}, grad norm {head.grad_norm:.3e})")
    return 0


def cmd_otdd(args) -> int:
    from .otdd import otdd
    rep = otdd(read_dump(args.source), read_dump(args.target), p=args.p, k=args.k, solver=args.solver,
               epsilon=args.epsilon, seed=args.seed)
    saved = None
    if args.label_distances:
        import numpy as np
        saved = str(args.label_distances)
        np.savetxt(saved, rep.label_distances, delimiter=",", fmt="%.17g")
    print(json.dumps({"distance": rep.distance, "solver": rep.solver, "p": rep.p, "k": args.k,
                      "epsilon": rep.epsilon, "source": str(args.source), "target": str(args.target),
                      "label_pairs": [len(rep.source_labels.pairs), len(rep.target_labels.pairs)],
                      "label_distances": saved}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import CASES, run_suite
    results = run_suite(args.instances, args.seed, step=args.step, tol=args.tol,
                        cases=args.cases or CASES)
    failed = 0
    for case in dict.fromkeys(r.case for r in results):
        rs = [r for r in results if r.case == case]
        worst = max(r.report.max_rel_error for r in rs)
        bad = sum(not r.passed for r in rs)
        failed += bad
        print(f"{'PASS' if not bad else 'FAIL'} {case}: {len(rs)} instances, max rel error {worst:.3e}")
    return 1 if failed else 0


def cmd_report(args) -> int:
    from .harness.experiment import load_reports, summarize, write_summary
    summary = summarize(load_reports(args.runs))
    write_summary(summary, args.out or args.runs)
    _print_summary(summary)
    return 0


def cmd_run(args) -> int:
    from .harness.experiment import run_experiment
    exp = _experiment(args)
    summary = run_experiment(exp, args.out, args.workers)
    _print_summary(summary)
    return 1 if summary["diverged"] else 0


def _print_summary(summary: dict) -> None:
    print(f"{'method':14s} {'runs':>4s} {'dLP':>9s} {'sd':>7s} {'OTDD':>8s} {'L2':>8s} {'A_LP':>7s}")
    for r in summary["methods"]:
        print(f"{r['method']:14s} {r['runs']:4d} {r['delta_lp_mean']:+9.4f} {r['delta_lp_sd']:7.4f} "
              f"{r['otdd_mean']:8.4f} {r['l2_mean']:8.4f} {r['a_lp_mean']:7.4f}")
    for scope in ("spearman_runs", "spearman_methods"):
        s = summary[scope]
        print(f"{scope}: OTDD vs forgetting {s['otdd']}, L2 vs forgetting {s['l2']}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proxyfda", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI experiment file")
        sp.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                        help="override a config value (repeatable)")

    sp = sub.add_parser("gen", help="write a synthetic world's feature dumps")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--world-seed", type=int)
    sp.add_argument("--format", choices=("fdaf", "csv"), default="fdaf")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("finetune", help="one fine-tuning run")
    with_config(sp)
    sp.add_argument("--method", default="fda", choices=("none", "pointwise-l2", "fda", "proxy-fda"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("probe", help="linear probe on two dumps")
    sp.add_argument("train")
    sp.add_argument("test")
    sp.add_argument("--l2", type=float, default=1e-2)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--epochs", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("otdd", help="dataset distance between two dumps")
    sp.add_argument("source")
    sp.add_argument("target")
    sp.add_argument("--p", type=float, default=2.0)
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--solver", choices=("auto", "exact", "sinkhorn"), default="auto")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--label-distances", metavar="CSV", help="save the pseudo-class distance matrix here")
    sp.set_defaults(func=cmd_otdd)

    sp = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--step", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--cases", nargs="*")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("report", help="aggregate run records into a summary")
    sp.add_argument("runs", help="directory of *.jsonl run records")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("run", help="sweep methods x seeds from a config file")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (DumpFormatError, FileNotFoundError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Sweeps over regularizers and seeds, plus the comparison summary."""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from ..fda import REGULARIZERS
from ..graph import ConfigError
from .config import ExperimentConfig
from .train import RunReport, finetune
from .world import generate_world

__all__ = ["run_experiment", "summarize", "load_reports", "write_summary", "SUMMARY_COLUMNS"]

SUMMARY_COLUMNS = ["method", "runs", "delta_lp_mean", "delta_lp_sd", "otdd_mean", "otdd_sd",
                   "l2_mean", "l2_sd", "a_lp_mean", "a_lp_sd", "delta_lp_downstream_mean"]


def _one(args):
    exp, method, seed, out_dir = args
    world = generate_world(exp.world, exp.world_seed)
    ckpt = None if out_dir is None else Path(out_dir) / "runs" / f"{method}_seed{seed}.npz"
    report = finetune(world, exp.run_config(method), seed, checkpoint=ckpt)
    if out_dir is not None:
        report.write_jsonl(Path(out_dir) / "runs" / f"{method}_seed{seed}.jsonl")
    return report


def run_experiment(exp: ExperimentConfig, out_dir=None, workers: int | None = None) -> dict:
    """Run every (method, seed) pair; results come back in sweep order whatever the worker count."""
    if not exp.methods:
        raise ConfigError("no methods to run; list at least one regularizer under [run] methods")
    if out_dir is not None:
        (Path(out_dir) / "runs").mkdir(parents=True, exist_ok=True)
    jobs = [(exp, m, s, out_dir) for m in exp.methods for s in exp.seeds]
    workers = exp.workers if workers is None else workers
    if workers <= 1:
        reports = [_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_one, jobs))
    summary = summarize(reports)
    if out_dir is not None:
        write_summary(summary, out_dir)
    return summary


def _method(report: RunReport) -> str:
    return report.config["regularizer"]


def _sd(x) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def _spearman(a, b) -> float | None:
    if len(a) < 3 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    return float(spearmanr(a, b)[0])


def summarize(reports: list[RunReport]) -> dict:
    """Per-method mean and sd, and rank correlations of distance against forgetting.

    Reports are put in canonical (method, seed) order first, so the result does
    not depend on how they were collected.
    """
    rank = {m: i for i, m in enumerate(REGULARIZERS)}
    reports = sorted(reports, key=lambda r: (rank.get(_method(r), len(rank)), _method(r), r.seed))
    ok = [r for r in reports if r.status == "ok"]
    methods = list(dict.fromkeys(_method(r) for r in reports))
    rows = []
    for m in methods:
        rs = [r.summary for r in ok if _method(r) == m]
        col = {k: [s[k] for s in rs] for k in ("delta_lp_mean", "otdd_mean", "l2_distance_mean", "a_lp",
                                                "delta_lp_downstream")}
        rows.append({
            "method": m, "runs": len(rs),
            "delta_lp_mean": float(np.mean(col["delta_lp_mean"])) if rs else float("nan"),
            "delta_lp_sd": _sd(col["delta_lp_mean"]),
            "otdd_mean": float(np.mean(col["otdd_mean"])) if rs else float("nan"),
            "otdd_sd": _sd(col["otdd_mean"]),
            "l2_mean": float(np.mean(col["l2_distance_mean"])) if rs else float("nan"),
            "l2_sd": _sd(col["l2_distance_mean"]),
            "a_lp_mean": float(np.mean(col["a_lp"])) if rs else float("nan"),
            "a_lp_sd": _sd(col["a_lp"]),
            "delta_lp_downstream_mean": float(np.mean(col["delta_lp_downstream"])) if rs else float("nan"),
        })
    forget = [-r.summary["delta_lp_mean"] for r in ok]
    otdd_runs = [r.summary["otdd_mean"] for r in ok]
    l2_runs = [r.summary["l2_distance_mean"] for r in ok]
    by_method = [row for row in rows if row["runs"]]
    return {
        "methods": rows,
        "spearman_runs": {"otdd": _spearman(otdd_runs, forget), "l2": _spearman(l2_runs, forget)},
        "spearman_methods": {
            "otdd": _spearman([r["otdd_mean"] for r in by_method], [-r["delta_lp_mean"] for r in by_method]),
            "l2": _spearman([r["l2_mean"] for r in by_method], [-r["delta_lp_mean"] for r in by_method]),
        },
        "runs": len(reports),
        "diverged": [f"{_method(r)}/seed{r.seed}" for r in reports if r.status != "ok"],
    }


def write_summary(summary: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for row in summary["methods"]:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)


def load_reports(run_dir) -> list[RunReport]:
    paths = sorted(Path(run_dir).glob("*.jsonl"))
    if not paths:
        raise FileNotFoundError(f"no run records (*.jsonl) under {run_dir}")
    return [RunReport.read_jsonl(p) for p in paths]

"""Variant-by-seed ablation runner.

Every (variant, seed) pair is trained from the same data with the same budget;
only the temporal operator differs. Runs are independent, so they may be
spread over worker processes (``TEI_THREADS``); each worker pins BLAS to one
thread so results do not depend on the worker count.
"""
import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .backbone import build_network, canonical_variant, train
from .errors import ContractError

DEFAULT_VARIANTS = ("tsn", "tsm", "se+tim", "mem", "tim", "mem+tim")
# display names used in CSV output
LABELS = {"none": "tsn", "tsm": "tsm", "se+tim": "se+tim", "mem": "mem", "tim": "tim",
          "mem+tim": "mem+tim"}


def worker_count(default=1):
    """Worker cap from ``TEI_THREADS``; raises ContractError on a malformed value."""
    raw = os.environ.get("TEI_THREADS")
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ContractError(f"TEI_THREADS must be a positive integer, got {raw!r}")
    return n


def parse_variants(text):
    names = [v.strip() for v in text.split(",") if v.strip()]
    if not names:
        raise ContractError("no variants given")
    out = [canonical_variant(v) for v in names]
    if len(set(out)) != len(out):
        raise ContractError(f"duplicate variants in {text!r}")
    return out


@dataclass
class RunResult:
    variant: str
    seed: int
    eval_acc: float
    log: list


def _run_one(args):
    train_ds, eval_ds, variant, seed, config = args
    with threadpool_limits(limits=1):
        spec = replace(config.network, variant=variant)
        model = build_network(spec, seed=seed)
        tc = config.train
        log = train(model, train_ds, tc.epochs, tc.schedule(), tc.batch_size, seed=seed,
                    eval_dataset=eval_ds, momentum=tc.momentum, weight_decay=tc.weight_decay)
    return RunResult(variant, seed, log[-1]["eval_acc"], log)


def run_ablation(train_ds, eval_ds, variants, seeds, config, workers=None):
    """Train every variant under every seed; returns ``{variant: [RunResult per seed]}``.

    ``config`` is a RunConfig; its network section supplies everything except
    the variant, and its train section the budget.
    """
    variants = [canonical_variant(v) for v in variants]
    seeds = list(seeds)
    if not variants or not seeds:
        raise ContractError("ablation needs at least one variant and one seed")
    jobs = [(train_ds, eval_ds, v, s, config) for v in variants for s in seeds]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    table = {v: [] for v in variants}
    for r in results:
        table[r.variant].append(r)
    return table


def summary_rows(table):
    """One row per variant: per-seed final eval accuracy and their mean."""
    rows = []
    for variant, runs in table.items():
        row = {"variant": LABELS[variant]}
        for r in runs:
            row[f"seed{r.seed}"] = r.eval_acc
        row["mean"] = float(np.mean([r.eval_acc for r in runs]))
        rows.append(row)
    return rows


def write_summary_csv(table, path):
    rows = summary_rows(table)
    header = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[k] if k == "variant" else f"{row[k]:.6f}" for k in header])


def write_epoch_log_csv(table, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "epoch", "lr", "train_loss", "train_acc", "eval_acc"])
        for variant, runs in table.items():
            for r in runs:
                for row in r.log:
                    w.writerow([LABELS[variant], r.seed, row["epoch"], repr(row["lr"]),
                                repr(row["train_loss"]), repr(row["train_acc"]), repr(row["eval_acc"])])
